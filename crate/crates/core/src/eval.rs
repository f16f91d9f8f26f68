//! Regression metrics, rank correlation, bootstrap intervals and
//! station-level skill.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub r2: f64,
    pub rmse: f64,
    pub nmae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    R2,
    Rmse,
    Nmae,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::R2, Metric::Rmse, Metric::Nmae];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::Rmse => "rmse",
            Metric::Nmae => "nmae",
        }
    }

    pub fn evaluate(self, y: &[f64], yhat: &[f64]) -> Result<f64> {
        check_pairs(y, yhat)?;
        match self {
            Metric::R2 => r2(y, yhat),
            Metric::Rmse => Ok(rmse(y, yhat)),
            Metric::Nmae => nmae(y, yhat),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_pairs(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::InvalidInput(format!(
            "metric needs equal nonzero lengths, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sse(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let ybar = mean(y);
    let sst: f64 = y.iter().map(|a| (a - ybar) * (a - ybar)).sum();
    if !(sst > 0.0) {
        return Err(Error::UndefinedMetric(
            "R² undefined: observations have zero variance".into(),
        ));
    }
    Ok(1.0 - sse(y, yhat) / sst)
}

fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    (sse(y, yhat) / y.len() as f64).sqrt()
}

fn nmae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let ybar = mean(y);
    if ybar == 0.0 {
        return Err(Error::UndefinedMetric(
            "NMAE undefined: mean observation is zero".into(),
        ));
    }
    let sae: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(sae / (y.len() as f64 * ybar))
}

/// Metrics tagged with the model, target and split they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub target: String,
    pub split: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// R², RMSE and NMAE of estimates `yhat` against observations `y`.
pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    check_pairs(y, yhat)?;
    Ok(Metrics {
        n: y.len(),
        r2: r2(y, yhat)?,
        rmse: rmse(y, yhat),
        nmae: nmae(y, yhat)?,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "correlation needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::UndefinedMetric(
            "correlation undefined for a constant vector".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "spearman needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Linear-interpolated percentile (`p` in [0, 1]) of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    /// Individual observations.
    #[default]
    Observation,
    /// All observations of one day move together.
    Day,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub metric: Metric,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub seed: u64,
    /// True when all `n^n` resamples were enumerated instead of drawn.
    pub exact: bool,
}

pub const DEFAULT_RESAMPLES: usize = 1000;

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Percentile bootstrap interval (2.5th / 97.5th) of `metric`.
///
/// `groups` assigns each pair to a resampling unit (e.g. its day); `None`
/// resamples individual pairs. When the number of distinct resamples
/// `g^g` is at most `resamples`, every resample is enumerated once (the
/// exact bootstrap distribution); otherwise `resamples` draws are made, each
/// from its own RNG stream so the result does not depend on evaluation order.
/// Resamples on which the metric is undefined are skipped (enumeration) or
/// redrawn, with at most `10 * resamples` redraws.
pub fn bootstrap_ci(
    y: &[f64],
    yhat: &[f64],
    metric: Metric,
    resamples: usize,
    seed: u64,
    groups: Option<&[usize]>,
) -> Result<BootstrapCi> {
    check_pairs(y, yhat)?;
    if resamples == 0 {
        return Err(Error::InvalidInput("bootstrap needs B >= 1".into()));
    }
    let point = metric.evaluate(y, yhat)?;
    let units: Vec<Vec<usize>> = match groups {
        None => (0..y.len()).map(|i| vec![i]).collect(),
        Some(g) => {
            if g.len() != y.len() {
                return Err(Error::InvalidInput("group labels length mismatch".into()));
            }
            let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &label) in g.iter().enumerate() {
                by.entry(label).or_default().push(i);
            }
            by.into_values().collect()
        }
    };
    let g = units.len();
    let eval_draw = |draw: &[usize]| -> Option<f64> {
        let idx: Vec<usize> = draw.iter().flat_map(|&u| units[u].iter().copied()).collect();
        metric.evaluate(&gather(y, &idx), &gather(yhat, &idx)).ok()
    };

    let exhaustive = (g as f64).powi(g as i32) <= resamples as f64;
    let mut values = Vec::new();
    if exhaustive {
        let total = g.pow(g as u32);
        let mut draw = vec![0usize; g];
        for code in 0..total {
            let mut c = code;
            for slot in draw.iter_mut() {
                *slot = c % g;
                c /= g;
            }
            if let Some(v) = eval_draw(&draw) {
                values.push(v);
            }
        }
        if values.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "{metric} undefined on every resample"
            )));
        }
    } else {
        let mut redraws = 0usize;
        let mut draw = vec![0usize; g];
        for b in 0..resamples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            loop {
                for slot in draw.iter_mut() {
                    *slot = rng.gen_range(0..g);
                }
                if let Some(v) = eval_draw(&draw) {
                    values.push(v);
                    break;
                }
                redraws += 1;
                if redraws > 10 * resamples {
                    return Err(Error::UndefinedMetric(format!(
                        "{metric} undefined on too many bootstrap resamples"
                    )));
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        metric,
        point,
        lower: percentile_sorted(&values, 0.025),
        upper: percentile_sorted(&values, 0.975),
        resamples: values.len(),
        seed,
        exact: exhaustive,
    })
}

/// NMAE across stations of per-station mean observation vs mean estimate.
pub fn station_mean_skill<S: Ord + Clone>(
    records: &[(S, f64, f64)],
) -> Result<(f64, BTreeMap<S, (f64, f64)>)> {
    let mut groups: BTreeMap<S, (f64, f64, usize)> = BTreeMap::new();
    for (s, y, yhat) in records {
        let e = groups.entry(s.clone()).or_insert((0.0, 0.0, 0));
        e.0 += y;
        e.1 += yhat;
        e.2 += 1;
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("no station records".into()));
    }
    let means: BTreeMap<S, (f64, f64)> = groups
        .into_iter()
        .map(|(s, (sy, sh, n))| (s, (sy / n as f64, sh / n as f64)))
        .collect();
    let obs: Vec<f64> = means.values().map(|m| m.0).collect();
    let est: Vec<f64> = means.values().map(|m| m.1).collect();
    Ok((nmae(&obs, &est)?, means))
}

/// Formats with four significant digits.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = 3 - magnitude;
    if decimals > 0 {
        format!("{:.*}", decimals as usize, x)
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{:.0}", (x / scale).round() * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_fit() {
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.r2, m.rmse, m.nmae), (1.0, 0.0, 0.0));
    }

    #[test]
    fn constant_estimate_hand_values() {
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!(m.r2.abs() < 1e-15);
        assert!((m.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.nmae - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_metrics_error() {
        assert!(matches!(
            compute_metrics(&[2.0, 2.0], &[1.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            compute_metrics(&[-1.0, 1.0], &[1.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_monotone_cases() {
        let a = [1.0, 5.0, 2.0, 8.0];
        assert!((spearman(&a, &[10.0, 50.0, 20.0, 80.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[-1.0, -5.0, -2.0, -8.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&a, &[1.0; 4]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn bootstrap_degenerate_residuals() {
        let y = [1.0, 4.0, 2.0, 8.0, 3.0, 9.0];
        let ci = bootstrap_ci(&y, &y, Metric::Rmse, 1000, 1, None).unwrap();
        assert_eq!((ci.lower, ci.upper), (0.0, 0.0));
        assert!(!ci.exact);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let y: Vec<f64> = (0..40).map(|i| (i as f64).sin() + 2.0).collect();
        let yhat: Vec<f64> = y.iter().map(|v| v * 0.9 + 0.1).collect();
        let a = bootstrap_ci(&y, &yhat, Metric::R2, 300, 5, None).unwrap();
        assert_eq!(a, bootstrap_ci(&y, &yhat, Metric::R2, 300, 5, None).unwrap());
        assert_ne!(a, bootstrap_ci(&y, &yhat, Metric::R2, 300, 6, None).unwrap());
        assert!(a.lower <= a.upper);
    }

    #[test]
    fn bootstrap_by_day_groups() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let yhat = [1.5, 2.0, 2.5, 4.5, 5.0, 6.5, 6.0, 8.0];
        let days = [0, 0, 1, 1, 2, 2, 3, 3];
        let ci = bootstrap_ci(&y, &yhat, Metric::Rmse, 1000, 3, Some(&days)).unwrap();
        // 4 days -> 4^4 = 256 resamples enumerated.
        assert!(ci.exact);
        assert_eq!(ci.resamples, 256);
    }

    #[test]
    fn station_means() {
        let recs = [("A", 1.0, 2.0), ("B", 3.0, 2.0)];
        let (skill, means) = station_mean_skill(&recs).unwrap();
        assert!((skill - 0.5).abs() < 1e-15);
        assert_eq!(means["A"], (1.0, 2.0));
        let perfect = [("A", 1.0, 1.0), ("A", 3.0, 3.0), ("B", 2.0, 2.0)];
        assert_eq!(station_mean_skill(&perfect).unwrap().0, 0.0);
        assert!(station_mean_skill::<&str>(&[]).is_err());
    }

    #[test]
    fn four_significant_digits() {
        assert_eq!(sig4(0.61666), "0.6167");
        assert_eq!(sig4(5.4321), "5.432");
        assert_eq!(sig4(12.345), "12.35");
        assert_eq!(sig4(-0.012345), "-0.01235");
        assert_eq!(sig4(123456.0), "123500");
        assert_eq!(sig4(0.0), "0");
    }

    proptest! {
        #[test]
        fn scale_covariance(
            pairs in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 3..30),
            c in 0.01f64..100.0,
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let yhat: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
            let a = compute_metrics(&y, &yhat).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let hs: Vec<f64> = yhat.iter().map(|v| v * c).collect();
            let b = compute_metrics(&ys, &hs).unwrap();
            prop_assert!((a.r2 - b.r2).abs() < 1e-9 * a.r2.abs().max(1.0));
            prop_assert!((a.nmae - b.nmae).abs() < 1e-9 * a.nmae.max(1.0));
            prop_assert!((a.rmse * c - b.rmse).abs() < 1e-9 * b.rmse.max(1.0));
        }

        #[test]
        fn spearman_monotone_invariance(
            a in proptest::collection::vec(-100.0f64..100.0, 3..20),
            b in proptest::collection::vec(-100.0f64..100.0, 3..20),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            if let Ok(rho) = spearman(a, b) {
                let ta: Vec<f64> = a.iter().map(|v| v.exp().min(1e300) + 3.0 * v).collect();
                let rho2 = spearman(&ta, b).unwrap();
                prop_assert!((rho - rho2).abs() < 1e-12);
            }
        }
    }
}
