//! Acceptance criteria, one PASS/FAIL line each. Tolerances and runtime
//! budgets are pinned below.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use airsat_core::backbone::{Backbone, ResNetConfig};
use airsat_core::contrastive::simsiam_loss;
use airsat_core::dataset::{assign_splits, FilterConfig, ImageType, Split, SplitRatios, Target, MET_DIM};
use airsat_core::eval::{bootstrap_ci, compute_metrics, Metric};
use airsat_core::metembed::{fit_embedding, Forest, ForestSpec, Node, Tree};
use airsat_core::nn::to_f64_vec;
use airsat_core::runner::{
    self, emit_report, matrix_configs, prepare, run_experiment_cached, ExperimentConfig, Family, FeatureSet, RunArtifacts,
    RunCache,
};
use airsat_core::seed::rng;
use candle_core::{DType, Device, Tensor};
use chrono::{Duration as Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const METRIC_TOL: f64 = 1e-10;
const BOOTSTRAP_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-6;
const ADAPT_TOL: f64 = 1e-5;
const E2E_TRANSFER_R2: f64 = 0.5;
const E2E_BASELINE_R2: f64 = 0.3;
const E2E_SEEDS: [u64; 3] = [1, 2, 3];
const E2E_CORPUS_SEED: u64 = 11;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
}

fn run(name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let c = Criterion { name, budget };
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let took = start.elapsed();
    let outcome = match (outcome, c.budget) {
        (Ok(_), Some(b)) if took > b => Err(format!("took {took:.1?}, budget {b:?}")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {:<28} {detail} [{took:.2?}]", c.name);
    outcome.is_ok()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn metric_oracle() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let cases = 50;
    for _ in 0..cases {
        let n = r.gen_range(2..12);
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..40.0)).collect();
        let yhat: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..45.0)).collect();
        let m = compute_metrics(&y, &yhat).map_err(|e| e.to_string())?;
        let (r2, rmse, nmae) = common::brute_metrics(&y, &yhat);
        for (a, b) in [(m.r2, r2), (m.rmse, rmse), (m.nmae, nmae)] {
            worst = worst.max((a - b).abs());
        }
    }
    // A hand-derived case: y = [1, 2, 3], yhat = [1, 2, 4].
    let m = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
    for (a, b) in [(m.r2, 0.5), (m.rmse, (1.0f64 / 3.0).sqrt()), (m.nmae, 1.0 / 6.0)] {
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= METRIC_TOL, || format!("max abs error {worst:e}"))?;
    Ok(format!("{cases} random + 1 hand case, max abs error {worst:.1e}"))
}

fn bootstrap_oracle() -> Outcome {
    let y = [2.0, 5.0, 3.5];
    let yhat = [2.5, 4.0, 3.0];
    let mut checked = 0;
    for metric in Metric::ALL {
        let mut values = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let ys = [y[a], y[b], y[c]];
                    let hs = [yhat[a], yhat[b], yhat[c]];
                    if metric == Metric::R2 && a == b && b == c {
                        continue;
                    }
                    let (r2, rmse, nmae) = common::brute_metrics(&ys, &hs);
                    values.push(match metric {
                        Metric::R2 => r2,
                        Metric::Rmse => rmse,
                        Metric::Nmae => nmae,
                    });
                }
            }
        }
        values.sort_by(f64::total_cmp);
        let lo = common::brute_percentile(&values, 0.025);
        let hi = common::brute_percentile(&values, 0.975);
        let ci = bootstrap_ci(&y, &yhat, metric, 1000, 0, None).map_err(|e| e.to_string())?;
        ensure(ci.exact && ci.resamples == values.len(), || {
            format!("{metric}: {} resamples, exact={}", ci.resamples, ci.exact)
        })?;
        ensure(
            (ci.lower - lo).abs() <= BOOTSTRAP_TOL && (ci.upper - hi).abs() <= BOOTSTRAP_TOL,
            || format!("{metric}: [{}, {}] vs oracle [{lo}, {hi}]", ci.lower, ci.upper),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} metrics over 27 enumerated resamples"))
}

fn filter_golden() -> Outcome {
    let filter = FilterConfig::default();
    let cases = common::filter_cases();
    ensure(cases.len() >= 30, || format!("only {} fixture rows", cases.len()))?;
    let mismatches: Vec<String> = cases
        .iter()
        .filter_map(|c| {
            let got = common::verdict_label(&filter.classify(&c.meta));
            (got != c.expected).then(|| format!("{} {}: {got} != {}", c.meta.station_id, c.meta.date, c.expected))
        })
        .collect();
    ensure(mismatches.is_empty(), || mismatches.join("; "))?;
    let branches: BTreeSet<&str> = cases.iter().map(|c| c.expected.as_str()).collect();
    Ok(format!("{} rows, outcomes {branches:?}", cases.len()))
}

fn split_invariants() -> Outcome {
    let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
    let dates: Vec<NaiveDate> = (0..500).map(|i| start + Days::days(i)).collect();
    let stations = ["A", "B", "C"];
    let expected = (300, 100, 100);
    for seed in 0..100u64 {
        let a = assign_splits(dates.iter().copied(), SplitRatios::default(), seed).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for d in a.dates(split) {
                ensure(seen.insert(*d), || format!("seed {seed}: {d} in two splits"))?;
            }
        }
        ensure(seen.len() == dates.len(), || format!("seed {seed}: {} of 500 dates assigned", seen.len()))?;
        let sizes = (a.count(Split::Train), a.count(Split::Val), a.count(Split::Test));
        ensure(sizes == expected, || format!("seed {seed}: sizes {sizes:?}"))?;
        // Every station-day inherits its date's split.
        let mut by_date: BTreeMap<NaiveDate, BTreeSet<Split>> = BTreeMap::new();
        for d in &dates {
            for _ in stations {
                by_date.entry(*d).or_default().insert(a.get(d).unwrap());
            }
        }
        ensure(by_date.values().all(|s| s.len() == 1), || format!("seed {seed}: a day spans splits"))?;
    }
    Ok("100 seeds × 500 dates: disjoint, exhaustive, 300/100/100".into())
}

fn gradient_check() -> Outcome {
    let head = common::head_grad_check(11, 10);
    let siam = common::simsiam_grad_check(11, 10);
    let worst = |v: &[(f64, f64)]| v.iter().map(|&(a, f)| common::rel_err(a, f)).fold(0.0f64, f64::max);
    let (wh, ws) = (worst(&head), worst(&siam));
    ensure(wh <= GRAD_REL_TOL && ws <= GRAD_REL_TOL, || {
        format!("max relative error head {wh:.2e}, simsiam {ws:.2e}")
    })?;
    Ok(format!("10 points each, max relative error head {wh:.1e}, simsiam {ws:.1e}"))
}

fn stop_gradient() -> Outcome {
    let (z_max, p_nonzero) = common::stop_gradient_probe(5);
    ensure(z_max == 0.0, || format!("z-branch gradient {z_max:e}"))?;
    ensure(p_nonzero > 0, || "predictor branch received no gradient".into())?;
    Ok(format!("z-branch gradients exactly 0, {p_nonzero} p-branch tensors nonzero"))
}

fn loss_bounds() -> Outcome {
    let mut r = rng(7);
    let t = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, dim: usize| {
        let v: Vec<f64> = (0..rows * dim).map(|_| r.gen_range(-5.0..5.0)).collect();
        Tensor::from_vec(v, (rows, dim), &Device::Cpu).unwrap()
    };
    let loss = |p1: &Tensor, z1: &Tensor, p2: &Tensor, z2: &Tensor| {
        simsiam_loss(p1, z1, p2, z2).unwrap().to_scalar::<f64>().unwrap()
    };
    let samples = 2000;
    for _ in 0..samples {
        let rows = r.gen_range(1..8);
        let dim = r.gen_range(2..16);
        let l = loss(&t(&mut r, rows, dim), &t(&mut r, rows, dim), &t(&mut r, rows, dim), &t(&mut r, rows, dim));
        ensure((-1.0..=1.0).contains(&l), || format!("loss {l} outside [-1, 1]"))?;
    }
    let z = t(&mut r, 4, 6);
    let aligned = loss(&(&z * 2.0).unwrap(), &z, &(&z * 3.0).unwrap(), &z);
    let anti = loss(&z.neg().unwrap(), &z, &(&z * -0.5).unwrap(), &z);
    let e = |i: usize| {
        let mut v = vec![0.0f64; 4];
        v[i] = 1.0;
        Tensor::from_vec(v, (1, 4), &Device::Cpu).unwrap()
    };
    let orth = loss(&e(0), &e(2), &e(1), &e(3));
    for (got, want) in [(aligned, -1.0), (orth, 0.0), (anti, 1.0)] {
        ensure((got - want).abs() <= LOSS_TOL, || format!("got {got}, want {want}"))?;
    }
    Ok(format!("{samples} samples in [-1, 1]; aligned/orthogonal/anti = {aligned:.6}/{orth:.6}/{anti:.6}"))
}

fn embedding_invariants() -> Outcome {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut r = rng(13);
    let train: Vec<[f64; MET_DIM]> = (0..600).map(|_| std::array::from_fn(|_| normal.sample(&mut r))).collect();
    let spec = ForestSpec::new(13);
    let forest = fit_embedding(&train, &spec).map_err(|e| e.to_string())?;
    ensure(forest.dim() <= 2048, || format!("dimension {}", forest.dim()))?;
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..MET_DIM).map(|_| 2.0 * normal.sample(&mut r)).collect();
        let e = forest.embed(&x).map_err(|e| e.to_string())?;
        let dense = e.to_dense();
        let ones = dense.iter().filter(|&&v| v == 1.0).count();
        let zeros = dense.iter().filter(|&&v| v == 0.0).count();
        ensure(ones == 256 && ones + zeros == dense.len(), || format!("{ones} ones"))?;
    }
    // One stump on blh at 800 m: 799 goes left, 800 and above go right.
    let stump = Tree {
        nodes: vec![
            Node::Split {
                feature: 5,
                threshold: 800.0,
                left: 1,
                right: 2,
            },
            Node::Leaf { leaf: 0 },
            Node::Leaf { leaf: 1 },
        ],
    };
    let f = Forest::from_trees(
        ForestSpec {
            n_trees: 1,
            max_depth: 1,
            max_features: 1,
            seed: 0,
        },
        vec![stump],
    )
    .map_err(|e| e.to_string())?;
    let met = |blh: f64| [285.0, 70.0, 1013.0, 1.0, -2.0, blh];
    let low = f.embed(&met(799.0)).map_err(|e| e.to_string())?.to_dense();
    let high = f.embed(&met(800.0)).map_err(|e| e.to_string())?.to_dense();
    ensure(low == vec![1.0, 0.0] && high == vec![0.0, 1.0], || format!("{low:?} {high:?}"))?;
    Ok(format!("10^4 vectors: 256 ones each, dimension {}; stump routing matches", forest.dim()))
}

fn channel_adaptation() -> Outcome {
    let rgb = Backbone::random(common::tiny_resnet(), 3, 21, DType::F32).map_err(|e| e.to_string())?;
    let mut four = rgb.clone();
    four.store = common::deep_copy(&rgb.store);
    four.adapt_input_channels(4, 22).map_err(|e| e.to_string())?;
    let w = four.store.get("conv1.weight").map_err(|e| e.to_string())?;
    let zeroed = Tensor::cat(&[&w.narrow(1, 0, 3).unwrap(), &w.narrow(1, 3, 1).unwrap().zeros_like().unwrap()], 1)
        .map_err(|e| e.to_string())?;
    four.store.set("conv1.weight", &zeroed).map_err(|e| e.to_string())?;
    let mut r = rng(23);
    let v: Vec<f32> = (0..2 * 3 * 24 * 24).map(|_| r.gen_range(0.0..1.0)).collect();
    let x3 = Tensor::from_vec(v, (2, 3, 24, 24), &Device::Cpu).unwrap();
    let x4 = Tensor::cat(&[&x3, &Tensor::zeros((2, 1, 24, 24), DType::F32, &Device::Cpu).unwrap()], 1).unwrap();
    let a = to_f64_vec(&rgb.conv1(&x3).map_err(|e| e.to_string())?.flatten_all().unwrap()).unwrap();
    let b = to_f64_vec(&four.conv1(&x4).map_err(|e| e.to_string())?.flatten_all().unwrap()).unwrap();
    let worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f64, f64::max);
    ensure(worst <= ADAPT_TOL, || format!("max abs difference {worst:e}"))?;
    Ok(format!("{} first-layer activations, max abs difference {worst:.1e}", a.len()))
}

/// Test R² of baseline M and transfer I+M per seed, plus the runs for the
/// determinism check.
struct EndToEnd {
    outcome: Outcome,
    first: Vec<RunArtifacts>,
    corpus: Option<common::Corpus>,
    root: tempfile::TempDir,
}

fn e2e_config(corpus: &common::Corpus, family: Family, features: FeatureSet, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Target::OpAa, family, features, ImageType::Rgb, seed, &corpus.data);
    c.imagenet_weights = Some(corpus.imagenet.clone());
    c
}

fn e2e_pair(corpus: &common::Corpus, seed: u64, out: &Path) -> Result<Vec<RunArtifacts>, String> {
    let mut cache = RunCache::new();
    [(Family::Baseline, FeatureSet::Met), (Family::Transfer, FeatureSet::ImageMet)]
        .into_iter()
        .map(|(f, s)| run_experiment_cached(&e2e_config(corpus, f, s, seed), out, &mut cache).map_err(|e| e.to_string()))
        .collect()
}

fn test_r2(run: &RunArtifacts) -> f64 {
    run.metrics(Split::Test).map(|m| m.metrics.r2).unwrap_or(f64::NAN)
}

fn synthetic_end_to_end() -> EndToEnd {
    let root = tempfile::tempdir().unwrap();
    let mut e = EndToEnd {
        outcome: Err("not run".into()),
        first: Vec::new(),
        corpus: None,
        root,
    };
    let r = catch_unwind(AssertUnwindSafe(|| {
        let synth = common::e2e_synth(E2E_CORPUS_SEED);
        let corpus = common::build_corpus(e.root.path(), &synth, ResNetConfig::resnet50());
        let mut lines = Vec::new();
        let mut ok = true;
        for seed in E2E_SEEDS {
            let runs = e2e_pair(&corpus, seed, &e.root.path().join("out"))?;
            let (base, fused) = (test_r2(&runs[0]), test_r2(&runs[1]));
            ok &= base >= E2E_BASELINE_R2 && fused >= E2E_TRANSFER_R2;
            lines.push(format!("s{seed}: M {base:.3}, I+M {fused:.3}"));
            if seed == E2E_SEEDS[0] {
                e.first = runs;
            }
        }
        e.corpus = Some(corpus);
        let detail = format!(
            "test R² (need M ≥ {E2E_BASELINE_R2}, I+M ≥ {E2E_TRANSFER_R2}): {}",
            lines.join("; ")
        );
        if ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    }));
    e.outcome = r.unwrap_or_else(|_| Err("panicked".into()));
    e
}

fn fingerprint(run: &RunArtifacts) -> String {
    serde_json::to_string(&(&run.metrics, &run.intervals, &run.predictions, run.station_mean_nmae)).unwrap()
}

fn determinism(e2e: &EndToEnd) -> Outcome {
    let corpus = e2e.corpus.as_ref().ok_or("end-to-end corpus unavailable")?;
    ensure(e2e.first.len() == 2, || "first end-to-end runs unavailable".into())?;
    let again = e2e_pair(corpus, E2E_SEEDS[0], &e2e.root.path().join("rerun"))?;
    for (a, b) in e2e.first.iter().zip(&again) {
        ensure(fingerprint(a) == fingerprint(b), || {
            format!("{} {} differs on rerun", a.config.family, a.config.features)
        })?;
        ensure(a.config_hash == b.config_hash, || "config hash differs".into())?;
    }
    Ok(format!(
        "seed {}: metrics, intervals and {} predictions bit-identical for M and I+M",
        E2E_SEEDS[0],
        again[1].predictions.len()
    ))
}

fn report_shape() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(root.path(), &common::tiny_synth(5), common::tiny_resnet());
    let base = common::tiny_config(&corpus, Family::Baseline, FeatureSet::Met, Target::OpAa, 1);
    let configs = matrix_configs(&base);
    ensure(configs.len() == 45, || format!("{} matrix configs", configs.len()))?;
    let runs = runner::run_matrix(&configs, &root.path().join("runs")).map_err(|e| e.to_string())?;
    let files = emit_report(&runs, &root.path().join("report")).map_err(|e| e.to_string())?;
    ensure(files.tables.len() == 1, || format!("{} tables", files.tables.len()))?;

    let mut rdr = csv::Reader::from_path(&files.tables[0]).map_err(|e| e.to_string())?;
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let want_header = [
        "Model", "Features", "OP_AA R2", "OP_AA RMSE", "OP_AA NMAE", "OP_DTT R2", "OP_DTT RMSE", "OP_DTT NMAE", "PM10 R2",
        "PM10 RMSE", "PM10 NMAE",
    ];
    ensure(header == want_header, || format!("header {header:?}"))?;
    let rows: Vec<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert!(r.iter().skip(2).all(|v| v.parse::<f64>().is_ok()), "empty cell in {r:?}");
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    let want_rows: Vec<(String, String)> = [
        ("Baseline", "M"),
        ("Random", "I+M"),
        ("Transfer", "I+M"),
        ("Fine-tuning", "I+M"),
        ("Transfer", "I+H"),
        ("Fine-tuning", "I+H"),
        ("SimSiam", "I+M"),
        ("SimSiam BJ", "I+M"),
        ("SimSiam DL", "I+M"),
        ("Random", "I"),
        ("Transfer", "I"),
        ("Fine-tuning", "I"),
        ("SimSiam", "I"),
        ("SimSiam BJ", "I"),
        ("SimSiam DL", "I"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    ensure(rows == want_rows, || format!("rows {rows:?}"))?;

    let mut long = csv::Reader::from_path(&files.long).map_err(|e| e.to_string())?;
    let split_col = long.headers().unwrap().iter().position(|h| h == "split").ok_or("no split column")?;
    let test_rows = long.records().filter(|r| r.as_ref().is_ok_and(|r| &r[split_col] == "test")).count();
    ensure(test_rows == 45, || format!("{test_rows} test rows in the long table"))?;

    // Every sample of a day shares that day's split.
    let prepared = prepare(&base).map_err(|e| e.to_string())?;
    let mut by_date: BTreeMap<NaiveDate, BTreeSet<Split>> = BTreeMap::new();
    for s in &prepared.samples {
        by_date.entry(s.date).or_default().insert(s.split);
    }
    ensure(by_date.values().all(|s| s.len() == 1), || "a day spans splits".into())?;
    Ok(format!("15 rows × 11 columns in table order; {test_rows} test rows in the long table"))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut passed = vec![
        run("metric oracle", Some(secs(1)), metric_oracle),
        run("bootstrap oracle", Some(secs(1)), bootstrap_oracle),
        run("filter golden", Some(secs(1)), filter_golden),
        run("split invariants", Some(secs(10)), split_invariants),
        run("gradient check", Some(secs(30)), gradient_check),
        run("stop-gradient", Some(secs(5)), stop_gradient),
        run("simsiam loss bounds", None, loss_bounds),
        run("embedding invariants", Some(secs(10)), embedding_invariants),
        run("channel adaptation", Some(secs(10)), channel_adaptation),
    ];
    let mut e2e = None;
    passed.push(run("synthetic end-to-end", Some(secs(30 * 60)), || {
        let r = synthetic_end_to_end();
        let outcome = r.outcome.clone();
        e2e = Some(r);
        outcome
    }));
    passed.push(run("determinism", None, || match &e2e {
        Some(r) => determinism(r),
        None => Err("end-to-end did not run".into()),
    }));
    passed.push(run("report shape", None, report_shape));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
