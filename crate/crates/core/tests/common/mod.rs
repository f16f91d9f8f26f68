//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use airsat_core::backbone::{Backbone, FreezePolicy, ResNetConfig};
use airsat_core::contrastive::{siamese_forward, simsiam_loss, SimSiamHeads};
use airsat_core::dataset::filter::{Branch, Verdict};
use airsat_core::dataset::{ImageType, SceneMeta, StationId, Target};
use airsat_core::head::build_head;
use airsat_core::head::HeadSpec;
use airsat_core::nn::{file_sha256, to_f64_vec, ParamStore};
use airsat_core::runner::{ExperimentConfig, Family, FeatureSet, WeightsRef};
use airsat_core::synthgen::{noise_sd_for_snr, write_corpus, SynthConfig};
use candle_core::{DType, Device, Tensor};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// R², RMSE and NMAE written out from their definitions, one loop each.
pub fn brute_metrics(y: &[f64], yhat: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mut ybar = 0.0;
    for v in y {
        ybar += v;
    }
    ybar /= n;
    let mut ss_res = 0.0;
    for i in 0..y.len() {
        ss_res += (y[i] - yhat[i]).powi(2);
    }
    let mut ss_tot = 0.0;
    for v in y {
        ss_tot += (v - ybar).powi(2);
    }
    let mut abs = 0.0;
    for i in 0..y.len() {
        abs += (y[i] - yhat[i]).abs();
    }
    (1.0 - ss_res / ss_tot, (ss_res / n).sqrt(), abs / n / ybar)
}

/// Percentile with linear interpolation between closest ranks, pos = p·(n−1).
pub fn brute_percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub struct FilterCase {
    pub meta: SceneMeta,
    pub expected: String,
    pub note: String,
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn filter_cases() -> Vec<FilterCase> {
    let mut rdr = csv::Reader::from_path(fixture("filter_golden.csv")).expect("fixture");
    let opt = |s: &str| if s.is_empty() { None } else { Some(s.parse::<f64>().expect("number")) };
    rdr.records()
        .map(|r| {
            let r = r.expect("fixture row");
            FilterCase {
                meta: SceneMeta {
                    station_id: StationId::new(&r[0]),
                    date: NaiveDate::parse_from_str(&r[1], "%Y-%m-%d").expect("date"),
                    instrument: r[2].to_string(),
                    cover: r[3].parse().expect("cover"),
                    cloud_cover: r[4].parse().expect("cloud_cover"),
                    green_q05: opt(&r[5]),
                    green_q50: opt(&r[6]),
                    green_q95: opt(&r[7]),
                    acquired: None,
                },
                expected: r[8].to_string(),
                note: r[9].to_string(),
            }
        })
        .collect()
}

pub fn verdict_label(v: &Verdict) -> &'static str {
    match v {
        Verdict::Accepted(Branch::Clear) => "clear",
        Verdict::Accepted(Branch::PartialCloud) => "partial",
        Verdict::Accepted(Branch::Edge) => "edge",
        Verdict::Rejected(_) => "reject",
    }
}

/// Relative error with the denominator floored at 1e-6: central differences
/// with h = 1e-5 on an O(1) loss carry about 1e-11 of roundoff, which would
/// otherwise swamp parameters whose true gradient is zero.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn entry(store: &ParamStore, name: &str, i: usize) -> f64 {
    to_f64_vec(&store.param(name).unwrap().var.as_tensor().flatten_all().unwrap()).unwrap()[i]
}

fn set_entry(store: &ParamStore, name: &str, i: usize, value: f64) {
    let t = store.param(name).unwrap().var.as_tensor().clone();
    let mut v = to_f64_vec(&t.flatten_all().unwrap()).unwrap();
    v[i] = value;
    store.set(name, &Tensor::from_vec(v, t.shape(), &Device::Cpu).unwrap()).unwrap();
}

/// `n` random (parameter, element) coordinates among the trainable parameters.
fn coordinates(store: &ParamStore, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let params: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, p)| (name.to_string(), p.var.as_tensor().elem_count()))
        .collect();
    (0..n)
        .map(|_| {
            let (name, len) = &params[rng.gen_range(0..params.len())];
            (name.clone(), rng.gen_range(0..*len))
        })
        .collect()
}

/// Analytic vs central-difference gradients at `points` coordinates.
/// Returns (analytic, numeric) pairs.
fn grad_pairs(
    store: &ParamStore,
    analytic: &candle_core::backprop::GradStore,
    points: &[(String, usize)],
    loss: &dyn Fn() -> f64,
    h: f64,
) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|(name, i)| {
            let var = store.param(name).unwrap().var.clone();
            let a = analytic
                .get(var.as_tensor())
                .map(|g| to_f64_vec(&g.flatten_all().unwrap()).unwrap()[*i])
                .unwrap_or(0.0);
            let x0 = entry(store, name, *i);
            set_entry(store, name, *i, x0 + h);
            let up = loss();
            set_entry(store, name, *i, x0 - h);
            let down = loss();
            set_entry(store, name, *i, x0);
            (a, (up - down) / (2.0 * h))
        })
        .collect()
}

/// Regression head in f64 under squared-error loss, dropout off.
pub fn head_grad_check(seed: u64, points: usize) -> Vec<(f64, f64)> {
    let head = build_head(
        HeadSpec {
            input_dim: 5,
            hidden_dim: 7,
            dropout: 0.2,
        },
        seed,
        DType::F64,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let x = random_tensor(&mut rng, &[6, 5]);
    let y = random_tensor(&mut rng, &[6]);
    let loss_t = || head.forward(&x, None).unwrap().sub(&y).unwrap().sqr().unwrap().mean_all().unwrap();
    let grads = loss_t().backward().unwrap();
    let points = coordinates(&head.store, points, &mut rng);
    grad_pairs(&head.store, &grads, &points, &|| scalar(&loss_t()), 1e-6)
}

pub fn tiny_resnet() -> ResNetConfig {
    ResNetConfig {
        width: 2,
        blocks: [1, 1, 1, 1],
    }
}

/// Backbone + projector + predictor in f64 on 16×16 views. The targets z
/// are held at their base values so the finite differences see the same
/// function the stop-gradient loss differentiates.
pub fn simsiam_grad_check(seed: u64, points: usize) -> Vec<(f64, f64)> {
    let mut backbone = Backbone::random(tiny_resnet(), 3, seed, DType::F64).unwrap();
    backbone.set_freeze_policy(FreezePolicy::AllTrainable);
    let heads = SimSiamHeads::new(backbone.feature_dim(), 6, 5, seed + 1, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51a5);
    let v1 = random_tensor(&mut rng, &[4, 3, 16, 16]);
    let v2 = random_tensor(&mut rng, &[4, 3, 16, 16]);
    let base = siamese_forward(&backbone, &heads, &v1, &v2).unwrap();
    let (z1, z2) = (base.z1.detach(), base.z2.detach());
    let grads = simsiam_loss(&base.p1, &base.z1, &base.p2, &base.z2).unwrap().backward().unwrap();
    let loss = || {
        let o = siamese_forward(&backbone, &heads, &v1, &v2).unwrap();
        scalar(&simsiam_loss(&o.p1, &z1, &o.p2, &z2).unwrap())
    };
    // Half the points in the backbone, half in the heads.
    let mut pts = coordinates(&backbone.store, points / 2, &mut rng);
    let mut pairs = grad_pairs(&backbone.store, &grads, &pts, &loss, 1e-5);
    pts = coordinates(&heads.store, points - points / 2, &mut rng);
    pairs.extend(grad_pairs(&heads.store, &grads, &pts, &loss, 1e-5));
    pairs
}

pub fn deep_copy(store: &ParamStore) -> ParamStore {
    let mut copy = ParamStore::new(store.dtype());
    for (name, p) in store.iter() {
        copy.insert(name, p.var.as_tensor().copy().unwrap(), p.kind).unwrap();
    }
    copy
}

/// The z targets come from an independent copy of the network. Returns the
/// largest |gradient| reaching the copy's parameters and the number of
/// predictor-branch parameters that received a nonzero gradient.
pub fn stop_gradient_probe(seed: u64) -> (f64, usize) {
    let mut backbone = Backbone::random(tiny_resnet(), 3, seed, DType::F64).unwrap();
    backbone.set_freeze_policy(FreezePolicy::AllTrainable);
    let heads = SimSiamHeads::new(backbone.feature_dim(), 6, 5, seed + 1, DType::F64).unwrap();
    let z_backbone = Backbone {
        store: deep_copy(&backbone.store),
        ..backbone.clone()
    };
    let z_heads = SimSiamHeads {
        store: deep_copy(&heads.store),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5706);
    let v1 = random_tensor(&mut rng, &[4, 3, 16, 16]);
    let v2 = random_tensor(&mut rng, &[4, 3, 16, 16]);
    let p = siamese_forward(&backbone, &heads, &v1, &v2).unwrap();
    let z = siamese_forward(&z_backbone, &z_heads, &v1, &v2).unwrap();
    let grads = simsiam_loss(&p.p1, &z.z1, &p.p2, &z.z2).unwrap().backward().unwrap();
    let max_abs = |t: &Tensor| to_f64_vec(&t.flatten_all().unwrap()).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut z_max = 0.0f64;
    for store in [&z_backbone.store, &z_heads.store] {
        for (_, param) in store.iter() {
            if let Some(g) = grads.get(param.var.as_tensor()) {
                z_max = z_max.max(max_abs(g));
            }
        }
    }
    let mut p_nonzero = 0;
    for store in [&backbone.store, &heads.store] {
        for (_, param) in store.iter() {
            if grads.get(param.var.as_tensor()).is_some_and(|g| max_abs(g) > 0.0) {
                p_nonzero += 1;
            }
        }
    }
    (z_max, p_nonzero)
}

/// Writes a random backbone archive usable as pinned stand-in weights.
pub fn standin_weights(path: &Path, resnet: ResNetConfig, seed: u64) -> WeightsRef {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    Backbone::random(resnet, 3, seed, DType::F32)
        .unwrap()
        .save(path, &Default::default())
        .unwrap();
    WeightsRef::new(path, Some(file_sha256(path).unwrap()))
}

/// Synthetic corpus of the end-to-end check: 3 stations, 400 days, every
/// scene clear, signal-to-noise 3. Patches are 160 px so the full ResNet50
/// extracts 1200 scenes per seed within the time budget on one core.
pub fn e2e_synth(seed: u64) -> SynthConfig {
    let mut c = SynthConfig {
        patch_size: 160,
        image_types: vec![ImageType::Rgb],
        seed,
        ..Default::default()
    };
    c.noise_sd = noise_sd_for_snr(&c, 3.0).unwrap();
    c
}

pub struct Corpus {
    pub data: PathBuf,
    pub imagenet: WeightsRef,
    pub external: WeightsRef,
}

/// Corpus plus stand-in weights for the given topology.
pub fn build_corpus(root: &Path, synth: &SynthConfig, resnet: ResNetConfig) -> Corpus {
    let data = root.join("data");
    write_corpus(synth, &data).unwrap();
    Corpus {
        imagenet: standin_weights(&root.join("weights/imagenet.safetensors"), resnet, 99),
        external: standin_weights(&root.join("weights/external.safetensors"), resnet, 98),
        data,
    }
}

/// Small corpus and network for matrix-level tests: every family runs in seconds.
pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_days: 40,
        patch_size: 32,
        image_types: vec![ImageType::Rgb],
        seed,
        ..Default::default()
    }
}

pub fn tiny_config(corpus: &Corpus, family: Family, features: FeatureSet, target: Target, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(target, family, features, ImageType::Rgb, seed, &corpus.data);
    c.imagenet_weights = Some(corpus.imagenet.clone());
    c.external_weights = Some(corpus.external.clone());
    c.resnet = tiny_resnet();
    c.feature_batch = 16;
    c.train.max_epochs = 3;
    c.train.early_stop_patience = Some(2);
    c.simsiam.epochs = 1;
    c.simsiam.view_size = 16;
    c.simsiam.proj_dim = Some(8);
    c.simsiam.pred_hidden = 4;
    c.embedding.n_trees = 16;
    c.evaluation.bootstrap_resamples = 50;
    c
}
