//! Synthetic corpora with known latent structure.
//!
//! Each station-day carries a season `s`, an inverse boundary-layer term
//! `ib` visible in the meteorology, and an image-only latent `u`. Haze
//! `h = clamp(0.3·A·s + 0.3·ib + 0.4·u)` (A the season amplitude) darkens
//! scene contrast, and every target is an affine function of
//! `haze_strength·h + ib_coef·ib` plus Gaussian noise. The generator writes
//! the same manifest, CSV and raster formats as real data.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::io::{self, AqRow, ManifestRow, MetRow};
use crate::dataset::{ImageType, MetVector, Raster, StationId, Target, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub n_days: usize,
    pub haze_strength: f64,
    /// Weight of the met-visible inverse-blh term in the targets.
    pub ib_coef: f64,
    pub season_amplitude: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub patch_size: usize,
    /// Probability that a day's scene is cloud-free.
    pub clear_fraction: f64,
    /// Additive per-pixel Gaussian noise, as a fraction of the white level.
    pub speckle_sd: f64,
    pub textures_per_station: usize,
    pub image_types: Vec<ImageType>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stations: 3,
            n_days: 400,
            haze_strength: 1.0,
            ib_coef: 0.5,
            season_amplitude: 1.0,
            noise_sd: 0.05,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            patch_size: PATCH_SIZE,
            clear_fraction: 1.0,
            speckle_sd: 0.0,
            textures_per_station: 4,
            image_types: vec![ImageType::Rgb, ImageType::Toar],
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.n_stations == 0 || self.n_days == 0 {
            return bad("n_stations and n_days must be >= 1");
        }
        if !(self.noise_sd >= 0.0) || !(self.speckle_sd >= 0.0) {
            return bad("noise_sd and speckle_sd must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.clear_fraction) {
            return bad("clear_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.season_amplitude) {
            return bad("season_amplitude must lie in [0, 1]");
        }
        if self.patch_size < 8 || self.textures_per_station == 0 {
            return bad("patch_size must be >= 8 and textures_per_station >= 1");
        }
        Ok(())
    }

    pub fn station_ids(&self) -> Vec<StationId> {
        (0..self.n_stations)
            .map(|i| StationId::new(format!("S{:02}", i + 1)))
            .collect()
    }
}

/// Affine map from the latent signal to one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMap {
    pub offset: f64,
    pub scale: f64,
}

impl TargetMap {
    pub fn for_target(t: Target) -> Self {
        match t {
            Target::Pm10 => TargetMap {
                offset: 8.0,
                scale: 20.0,
            },
            Target::OpAa => TargetMap {
                offset: 0.5,
                scale: 2.0,
            },
            Target::OpDtt => TargetMap {
                offset: 0.5,
                scale: 1.8,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub station_id: String,
    pub date: NaiveDate,
    pub season: f64,
    pub haze: f64,
    pub image_latent: f64,
    pub inv_blh: f64,
    /// `haze_strength·haze + ib_coef·inv_blh`.
    pub signal: f64,
    pub noise: f64,
    pub texture: usize,
    pub clear: bool,
    pub pm10: f64,
    pub op_aa: f64,
    pub op_dtt: f64,
}

impl TruthRow {
    pub fn target(&self, t: Target) -> f64 {
        match t {
            Target::Pm10 => self.pm10,
            Target::OpAa => self.op_aa,
            Target::OpDtt => self.op_dtt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub targets: BTreeMap<Target, TargetMap>,
    /// Range of 1/blh used to normalize `inv_blh` to [0, 1].
    pub inv_blh_range: (f64, f64),
    pub rows: Vec<TruthRow>,
    pub met: Vec<MetRow>,
}

impl SynthTruth {
    /// Ratio of the signal's standard deviation to the noise standard
    /// deviation, both in signal units.
    pub fn snr(&self) -> f64 {
        signal_sd(&self.rows) / self.config.noise_sd
    }
}

fn signal_sd(rows: &[TruthRow]) -> f64 {
    let n = rows.len() as f64;
    let m = rows.iter().map(|r| r.signal).sum::<f64>() / n;
    (rows.iter().map(|r| (r.signal - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Season in [0, 1], peaking in mid-January.
pub fn season(date: NaiveDate) -> f64 {
    let doy = date.ordinal0() as f64;
    0.5 * (1.0 + (2.0 * PI * (doy - 14.0) / 365.25).cos())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Latents, meteorology and targets, without rendering any scene.
pub fn generate_truth(config: &SynthConfig) -> Result<SynthTruth> {
    config.validate()?;
    let stations = config.station_ids();
    let a = config.season_amplitude;
    let mut regional = rng(derive_seed(config.seed, "regional"));
    let mut station_rngs: Vec<ChaCha8Rng> = stations
        .iter()
        .map(|s| rng(derive_seed(config.seed, &format!("station/{s}"))))
        .collect();

    struct Draft {
        station: usize,
        date: NaiveDate,
        s: f64,
        u: f64,
        met: MetVector,
        eps: f64,
        texture: usize,
        clear: bool,
    }
    let mut drafts = Vec::with_capacity(config.n_days * stations.len());
    for d in 0..config.n_days {
        let date = config.start_date + Duration::days(d as i64);
        let s = season(date);
        let u: f64 = regional.gen();
        let t_reg = normal(&mut regional);
        let rh_reg = normal(&mut regional);
        let sp_reg = normal(&mut regional);
        let wind_reg = (normal(&mut regional), normal(&mut regional));
        let blh_reg = normal(&mut regional);
        for (i, srng) in station_rngs.iter_mut().enumerate() {
            let t2m = 12.0 - 16.0 * a * (s - 0.5) + 2.5 * t_reg + 0.5 * normal(srng);
            let rh = (65.0 + 15.0 * a * (s - 0.5) + 8.0 * rh_reg + 2.0 * normal(srng)).clamp(5.0, 100.0);
            let sp = 1005.0 + 6.0 * sp_reg + 0.5 * normal(srng) - 3.0 * i as f64;
            let wind_u = 1.5 + 1.2 * wind_reg.0 + 0.3 * normal(srng);
            let wind_v = 0.5 + 1.2 * wind_reg.1 + 0.3 * normal(srng);
            let blh = 900.0 * (1.0 - 0.55 * a * s) * (0.3 * blh_reg + 0.08 * normal(srng)).exp();
            drafts.push(Draft {
                station: i,
                date,
                s,
                u,
                met: MetVector {
                    t2m,
                    rh,
                    sp,
                    wind_u,
                    wind_v,
                    blh,
                },
                eps: normal(srng),
                texture: srng.gen_range(0..config.textures_per_station),
                clear: srng.gen::<f64>() < config.clear_fraction,
            });
        }
    }

    let inv: Vec<f64> = drafts.iter().map(|d| 1.0 / d.met.blh).collect();
    let lo = inv.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let targets: BTreeMap<Target, TargetMap> =
        Target::ALL.iter().map(|&t| (t, TargetMap::for_target(t))).collect();

    let mut rows = Vec::with_capacity(drafts.len());
    let mut met = Vec::with_capacity(drafts.len());
    for (d, inv_blh_raw) in drafts.iter().zip(&inv) {
        let ib = (inv_blh_raw - lo) / span;
        let h = (0.3 * a * d.s + 0.3 * ib + 0.4 * d.u).clamp(0.0, 1.0);
        let signal = config.haze_strength * h + config.ib_coef * ib;
        let noise = config.noise_sd * d.eps;
        let value = |t: Target| {
            let m = targets[&t];
            (m.offset + m.scale * (signal + noise)).max(0.0)
        };
        let station = &stations[d.station];
        rows.push(TruthRow {
            station_id: station.0.clone(),
            date: d.date,
            season: d.s,
            haze: h,
            image_latent: d.u,
            inv_blh: ib,
            signal,
            noise,
            texture: d.texture,
            clear: d.clear,
            pm10: value(Target::Pm10),
            op_aa: value(Target::OpAa),
            op_dtt: value(Target::OpDtt),
        });
        met.push(MetRow::new(station, d.date, &d.met));
    }
    Ok(SynthTruth {
        config: config.clone(),
        targets,
        inv_blh_range: (lo, hi),
        rows,
        met,
    })
}

/// Noise standard deviation giving the requested signal-to-noise ratio.
pub fn noise_sd_for_snr(config: &SynthConfig, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::Config("snr must be positive".into()));
    }
    let truth = generate_truth(&SynthConfig {
        noise_sd: 0.0,
        ..config.clone()
    })?;
    Ok(signal_sd(&truth.rows) / snr)
}

/// Level that haze brightens scenes towards.
pub fn white_level(image_type: ImageType) -> f32 {
    match image_type {
        ImageType::Rgb => 255.0,
        ImageType::Toar => 0.3,
    }
}

fn base_levels(image_type: ImageType) -> (&'static [f32], f32) {
    // Per-channel mean level and texture amplitude, in the product's units.
    match image_type {
        ImageType::Rgb => (&[95.0, 100.0, 85.0], 70.0),
        ImageType::Toar => (&[0.08, 0.09, 0.10, 0.22], 0.06),
    }
}

/// Procedural base texture: Gaussian blobs over oriented stripes.
pub fn base_texture(image_type: ImageType, size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let (levels, amp) = base_levels(image_type);
    let c = image_type.channels();
    let n_blobs = 10;
    let blobs: Vec<(f32, f32, f32, f32)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen::<f32>() * size as f32,
                rng.gen::<f32>() * size as f32,
                (0.04 + 0.12 * rng.gen::<f32>()) * size as f32,
                rng.gen::<f32>() * 2.0 - 1.0,
            )
        })
        .collect();
    let angle = rng.gen::<f32>() * std::f32::consts::PI;
    let period = (0.05 + 0.15 * rng.gen::<f32>()) * size as f32;
    let (ca, sa) = (angle.cos(), angle.sin());
    let channel_mix: Vec<f32> = (0..c).map(|_| 0.6 + 0.8 * rng.gen::<f32>()).collect();
    let mut field = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32, y as f32);
            let mut v = 0.3 * ((fx * ca + fy * sa) * 2.0 * std::f32::consts::PI / period).sin();
            for &(bx, by, r, w) in &blobs {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                v += w * (-d2 / (2.0 * r * r)).exp();
            }
            field[y * size + x] = v.tanh();
        }
    }
    let mut out = Raster::zeros(c, size, size);
    for ch in 0..c {
        let (lvl, mix) = (levels[ch], channel_mix[ch]);
        for (o, f) in out.plane_mut(ch).iter_mut().zip(&field) {
            *o = (lvl + 0.5 * amp * mix * f).max(0.0);
        }
    }
    out
}

/// Applies haze and season to a base texture:
/// `(1 − 0.5h)·texture + 0.5h·white`, NIR additionally scaled by `1 − 0.6s`,
/// then optional additive speckle.
pub fn generate_scene(
    base: &Raster,
    image_type: ImageType,
    h: f64,
    s: f64,
    speckle_sd: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Raster> {
    if !(0.0..=1.0).contains(&h) || !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidInput(format!("latents out of range: h={h}, s={s}")));
    }
    if base.channels != image_type.channels() {
        return Err(Error::InvalidInput(format!(
            "{}-channel texture for {image_type}",
            base.channels
        )));
    }
    let white = white_level(image_type);
    let (keep, add) = ((1.0 - 0.5 * h) as f32, (0.5 * h) as f32 * white);
    let mut out = base.clone();
    for c in 0..out.channels {
        let nir = image_type == ImageType::Toar && c == 3;
        let season_scale = if nir { (1.0 - 0.6 * s) as f32 } else { 1.0 };
        for v in out.plane_mut(c) {
            *v = (keep * *v + add) * season_scale;
        }
    }
    if speckle_sd > 0.0 {
        let sd = speckle_sd as f32 * white;
        for v in out.data.iter_mut() {
            let e: f32 = StandardNormal.sample(rng);
            *v = (*v + sd * e).max(0.0);
        }
    }
    Ok(out)
}

fn textures(
    config: &SynthConfig,
    station: &str,
    image_type: ImageType,
) -> Vec<Raster> {
    let mut r = rng(derive_seed(config.seed, &format!("texture/{station}/{image_type}")));
    (0..config.textures_per_station)
        .map(|_| base_texture(image_type, config.patch_size, &mut r))
        .collect()
}

/// Renders the scene of one truth row.
pub fn render(config: &SynthConfig, row: &TruthRow, base: &Raster, image_type: ImageType) -> Result<Raster> {
    let mut r = rng(derive_seed(
        config.seed,
        &format!("scene/{}/{}/{image_type}", row.station_id, row.date),
    ));
    generate_scene(base, image_type, row.haze, row.season, config.speckle_sd, &mut r)
}

fn quantile(sorted: &[f32], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] as f64 + (pos - lo as f64) * (sorted[hi] - sorted[lo]) as f64
}

/// Green-band reflectance quantiles (q05, q50, q95) of a TOAR raster.
pub fn green_quantiles(toar: &Raster) -> (f64, f64, f64) {
    let mut g = toar.plane(1).to_vec();
    g.sort_by(f32::total_cmp);
    (quantile(&g, 0.05), quantile(&g, 0.5), quantile(&g, 0.95))
}

/// Writes scenes.csv, met.csv, aq.csv, truth.csv, truth.json and the
/// rasters of clear days under `dir`. Cloudy days appear in the manifest
/// with nonzero cloud cover but no raster is written for them.
pub fn write_corpus(config: &SynthConfig, dir: &Path) -> Result<SynthTruth> {
    let truth = generate_truth(config)?;
    let mut manifest = Vec::new();
    let mut tex_cache: BTreeMap<(String, ImageType), Vec<Raster>> = BTreeMap::new();
    for row in &truth.rows {
        let mut qs = None;
        let cloud = if row.clear {
            0.0
        } else {
            let mut r = rng(derive_seed(config.seed, &format!("cloud/{}/{}", row.station_id, row.date)));
            0.05 + 0.6 * r.gen::<f64>()
        };
        let mut rendered = Vec::new();
        for &it in &config.image_types {
            let rel = format!("scenes/{}_{}_{}.f32", row.station_id, row.date, it.as_str().to_lowercase());
            if row.clear {
                let tex = tex_cache
                    .entry((row.station_id.clone(), it))
                    .or_insert_with(|| textures(config, &row.station_id, it));
                let raster = render(config, row, &tex[row.texture], it)?;
                io::write_raster(&dir.join(&rel), &raster, it)?;
                if it == ImageType::Toar {
                    qs = Some(green_quantiles(&raster));
                }
            }
            rendered.push((it, rel));
        }
        if qs.is_none() && row.clear {
            // RGB-only corpora: quantiles of the would-be TOAR scene.
            let tex = tex_cache
                .entry((row.station_id.clone(), ImageType::Toar))
                .or_insert_with(|| textures(config, &row.station_id, ImageType::Toar));
            qs = Some(green_quantiles(&render(config, row, &tex[row.texture], ImageType::Toar)?));
        }
        let (q05, q50, q95) = qs.unwrap_or((0.3, 0.35, 0.45));
        for (it, rel) in rendered {
            manifest.push(ManifestRow {
                station_id: row.station_id.clone(),
                date: row.date,
                image_type: it,
                instrument: "SYN".into(),
                cover: 1.0,
                cloud_cover: cloud,
                green_q05: Some(q05),
                green_q50: Some(q50),
                green_q95: Some(q95),
                path: rel,
                acquired: None,
            });
        }
    }
    let aq: Vec<AqRow> = truth
        .rows
        .iter()
        .map(|r| AqRow {
            station_id: r.station_id.clone(),
            date: r.date,
            pm10: Some(r.pm10),
            op_aa: Some(r.op_aa),
            op_dtt: Some(r.op_dtt),
        })
        .collect();
    io::write_csv(&dir.join("scenes.csv"), &manifest)?;
    io::write_csv(&dir.join("met.csv"), &truth.met)?;
    io::write_csv(&dir.join("aq.csv"), &aq)?;
    io::write_csv(&dir.join("truth.csv"), &truth.rows)?;
    let p = dir.join("truth.json");
    let summary = serde_json::json!({
        "config": truth.config,
        "targets": truth.targets,
        "inv_blh_range": truth.inv_blh_range,
        "snr": truth.snr(),
    });
    std::fs::write(&p, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_stations: 2,
            n_days: 365,
            patch_size: 16,
            ..Default::default()
        }
    }

    fn contrast(r: &Raster, c: usize) -> f32 {
        let p = r.plane(c);
        p.iter().copied().fold(f32::MIN, f32::max) - p.iter().copied().fold(f32::MAX, f32::min)
    }

    #[test]
    fn zero_latents_are_identity() {
        let mut r = rng(1);
        let base = base_texture(ImageType::Toar, 24, &mut r);
        let out = generate_scene(&base, ImageType::Toar, 0.0, 0.0, 0.0, &mut r).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn full_haze_halves_contrast() {
        let mut r = rng(2);
        let base = base_texture(ImageType::Rgb, 24, &mut r);
        let out = generate_scene(&base, ImageType::Rgb, 1.0, 0.3, 0.0, &mut r).unwrap();
        for c in 0..3 {
            assert!((contrast(&out, c) - 0.5 * contrast(&base, c)).abs() < 1e-4);
        }
    }

    #[test]
    fn season_scales_only_nir() {
        let mut r = rng(3);
        let base = base_texture(ImageType::Toar, 12, &mut r);
        let out = generate_scene(&base, ImageType::Toar, 0.0, 1.0, 0.0, &mut r).unwrap();
        assert_eq!(out.plane(0), base.plane(0));
        for (a, b) in out.plane(3).iter().zip(base.plane(3)) {
            assert!((a - 0.4 * b).abs() < 1e-7);
        }
    }

    #[test]
    fn noiseless_targets_are_reconstructable() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            ..small()
        };
        let t = generate_truth(&cfg).unwrap();
        for r in &t.rows {
            assert_eq!(r.signal, cfg.haze_strength * r.haze + cfg.ib_coef * r.inv_blh);
            let m = t.targets[&Target::OpAa];
            assert!((r.op_aa - (m.offset + m.scale * r.signal)).abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_differ_and_repeat() {
        let a = generate_truth(&small()).unwrap();
        assert_eq!(a, generate_truth(&small()).unwrap());
        let b = generate_truth(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn winter_exceeds_summer() {
        let t = generate_truth(&small()).unwrap();
        let mean = |months: &[u32]| {
            let v: Vec<f64> = t
                .rows
                .iter()
                .filter(|r| months.contains(&r.date.month()))
                .map(|r| r.pm10)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(&[12, 1, 2]) > mean(&[6, 7, 8]));
    }

    #[test]
    fn targets_stay_below_outlier_thresholds() {
        let t = generate_truth(&SynthConfig { noise_sd: 0.1, ..small() }).unwrap();
        for r in &t.rows {
            for target in Target::ALL {
                assert!(r.target(target) <= target.outlier_threshold());
            }
        }
    }

    #[test]
    fn snr_calibration() {
        let cfg = small();
        let sd = noise_sd_for_snr(&cfg, 3.0).unwrap();
        let t = generate_truth(&SynthConfig { noise_sd: sd, ..cfg }).unwrap();
        assert!((t.snr() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn corpus_round_trips_through_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_days: 20,
            clear_fraction: 0.5,
            ..small()
        };
        let truth = write_corpus(&cfg, dir.path()).unwrap();
        let corpus = crate::dataset::Corpus::load(
            &crate::dataset::DataPaths::in_dir(dir.path()),
            &crate::dataset::FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(corpus.records.len(), 40);
        let clear = truth.rows.iter().filter(|r| r.clear).count();
        assert_eq!(corpus.with_scene(ImageType::Toar).count(), clear);
        let rec = corpus.with_scene(ImageType::Rgb).next().unwrap();
        let (raster, _) = io::read_raster(&rec.scenes[&ImageType::Rgb].path).unwrap();
        assert_eq!((raster.channels, raster.height), (3, 16));
    }
}
