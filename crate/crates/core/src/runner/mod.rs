//! Experiment orchestration: one configured run from the data tables to
//! checkpoint, metrics and plots, the results matrix, and report emission.

mod config;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::*;
pub use report::{emit_report, ReportFiles};

use crate::backbone::{build_backbone, Backbone, FreezePolicy, InitMode};
use crate::contrastive::{pretrain_metadata, train_simsiam, SimSiamHistory};
use crate::dataset::io::{read_raster, write_csv};
use crate::dataset::{
    assign_splits, normalize, Corpus, MetVector, NormAccumulator, NormStats, Raster, Split,
    SplitAssignment, SplitRatios, StationId, MET_DIM,
};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_ci, compute_metrics, station_mean_skill, BootstrapCi, Metric, MetricsReport, ResampleUnit};
use crate::head::{build_head, fuse_features, predict_all, train_supervised, FineTuneModel, HeadModel, HeadSpec, Regressor, TrainHistory};
use crate::metembed::{fit_embedding, Forest};
use crate::nn::ParamStore;
use crate::seed::{derive_seed, RunSeeds};

trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| Error::stage(name, e))
    }
}

/// One labelled station-day of a run.
#[derive(Debug, Clone)]
pub struct Sample {
    pub station_id: StationId,
    pub date: NaiveDate,
    pub split: Split,
    pub met: MetVector,
    pub y: f64,
    pub scene: PathBuf,
}

/// Corpus, split assignment and labelled samples of one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub splits: SplitAssignment,
    pub samples: Vec<Sample>,
}

impl Prepared {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Clear scenes of the config's image type on dates of `split`
    /// (labelled or not), or on every date when `split` is `None`.
    pub fn scenes(&self, config: &ExperimentConfig, split: Option<Split>) -> Vec<PathBuf> {
        self.corpus
            .with_scene(config.image_type)
            .filter(|r| split.is_none() || self.splits.get(&r.date) == split)
            .filter_map(|r| r.scene(config.image_type).map(|s| s.path.clone()))
            .collect()
    }
}

/// Loads the corpus and assigns day-grouped splits over every date with a
/// clear scene of the config's image type. Samples are the records with
/// such a scene and an observation of the target; all families share them.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let corpus = Corpus::load(&config.data_paths(), &config.filter()?)?;
    let seeds = RunSeeds::from_root(config.seed);
    let dates = corpus.usable_dates(config.image_type);
    if dates.is_empty() {
        return Err(Error::Degenerate(format!(
            "no clear {} scenes in {}",
            config.image_type,
            config.data_dir.display()
        )));
    }
    let splits = assign_splits(dates, SplitRatios::default(), seeds.split)?;
    let samples = corpus
        .with_scene(config.image_type)
        .filter_map(|r| {
            let y = r.target(config.target)?;
            Some(Sample {
                station_id: r.station_id.clone(),
                date: r.date,
                split: splits.get(&r.date).expect("every usable date is assigned"),
                met: r.met,
                y,
                scene: r.scene(config.image_type)?.path.clone(),
            })
        })
        .collect();
    Ok(Prepared {
        corpus,
        splits,
        samples,
    })
}

/// Train-split standardisation of the meteorological inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetScaler {
    pub mean: [f64; MET_DIM],
    /// Population standard deviation; 1 for constant columns.
    pub std: [f64; MET_DIM],
}

impl MetScaler {
    pub fn fit(rows: &[[f64; MET_DIM]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("no rows to standardise".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; MET_DIM];
        let mut std = [0.0; MET_DIM];
        for j in 0..MET_DIM {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(MetScaler { mean, std })
    }

    pub fn apply(&self, met: &MetVector) -> [f64; MET_DIM] {
        let v = met.to_array();
        std::array::from_fn(|j| (v[j] - self.mean[j]) / self.std[j])
    }
}

/// Per-image normalisation statistics of the clear train-split scenes.
pub fn train_norm_stats(config: &ExperimentConfig, prepared: &Prepared) -> Result<NormStats> {
    let mut acc = NormAccumulator::new(config.image_type);
    for path in prepared.scenes(config, Some(Split::Train)) {
        acc.push(&read_raster(&path)?.0)?;
    }
    acc.finish()
}

fn load_normalized(path: &Path, norm: &NormStats) -> Result<Raster> {
    let (raster, header) = read_raster(path)?;
    if header.image_type != norm.image_type {
        return Err(Error::InvalidInput(format!(
            "{}: {} scene where {} was expected",
            path.display(),
            header.image_type,
            norm.image_type
        )));
    }
    normalize(&raster, norm)
}

fn digest(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Sha256 of every tensor of a store, for freeze checks.
pub fn store_digest(store: &ParamStore) -> Result<String> {
    store.digest()
}

/// Backbones, features and trunk activations reusable between runs that
/// would compute them identically (same weights source, normalisation and
/// scenes). The matrix shares one cache across its runs.
#[derive(Default)]
pub struct RunCache {
    features: HashMap<String, Vec<Vec<f32>>>,
    trunks: HashMap<String, Vec<Tensor>>,
    pretrained: HashMap<String, (Backbone, SimSiamHistory)>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One split's bootstrap interval of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInterval {
    pub split: Split,
    #[serde(flatten)]
    pub ci: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub station_id: String,
    pub date: NaiveDate,
    pub split: Split,
    pub observed: f64,
    pub estimated: f64,
}

/// Everything a run leaves behind. All files live in `dir` and carry
/// `config_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub config_snapshot: PathBuf,
    pub pretrained_backbone: Option<PathBuf>,
    pub metrics: Vec<MetricsReport>,
    pub intervals: Vec<SplitInterval>,
    /// NMAE of per-station mean estimates on the test split.
    pub station_mean_nmae: Option<f64>,
    pub history: TrainHistory,
    pub predictions: Vec<Prediction>,
    pub plots: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
    /// Backbone parameter digests before and after supervised training.
    pub backbone_digest: Option<(String, String)>,
    pub n_scenes_read: usize,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("run.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn metrics(&self, split: Split) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.split == split.as_str())
    }
}

struct ModelInputs {
    /// Frozen families: fused (N, d) matrix. Fine-tuning: side features or none.
    matrix: Option<Tensor>,
    trunks: Option<Vec<Tensor>>,
    dim: usize,
}

struct Built {
    backbone: Option<Backbone>,
    pretrained: Option<(Backbone, SimSiamHistory)>,
    scenes_read: usize,
}

fn backbone_source(config: &ExperimentConfig, seeds: &RunSeeds, prepared: &Prepared) -> serde_json::Value {
    let init = derive_seed(seeds.init, "backbone");
    match config.family {
        Family::Baseline => serde_json::Value::Null,
        Family::Random => serde_json::json!({ "random": init }),
        Family::Transfer | Family::Finetune => serde_json::json!({ "imagenet": config.imagenet_weights, "adapt": init }),
        Family::SimsiamBj | Family::SimsiamDl => serde_json::json!({ "external": config.external_weights, "adapt": init }),
        Family::Simsiam => match &config.simsiam_weights {
            Some(w) => serde_json::json!({ "simsiam_file": w, "adapt": init }),
            None => serde_json::json!({
                "simsiam": config.simsiam,
                "seed": seeds.pretrain,
                "corpus": config.pretrain_corpus,
                "splits": digest(&serde_json::to_value(&prepared.splits).expect("serialisable")),
            }),
        },
    }
}

fn pretrain_local(
    config: &ExperimentConfig,
    seeds: &RunSeeds,
    prepared: &Prepared,
    norm: &NormStats,
) -> Result<(Backbone, SimSiamHistory, usize)> {
    let split = match config.pretrain_corpus {
        PretrainCorpus::Train => Some(Split::Train),
        PretrainCorpus::All => None,
    };
    let paths = prepared.scenes(config, split);
    let scenes: Vec<Raster> = paths.iter().map(|p| load_normalized(p, norm)).collect::<Result<_>>()?;
    let refs: Vec<&Raster> = scenes.iter().collect();
    let mut backbone = Backbone::random(
        config.resnet,
        config.image_type.channels(),
        derive_seed(seeds.pretrain, "init"),
        DType::F32,
    )?;
    let history = train_simsiam(&mut backbone, &refs, &config.simsiam, seeds.pretrain)?;
    backbone.set_freeze_policy(FreezePolicy::AllFrozen);
    Ok((backbone, history, scenes.len()))
}

fn build_family_backbone(
    config: &ExperimentConfig,
    seeds: &RunSeeds,
    prepared: &Prepared,
    norm: &NormStats,
    cache: &mut RunCache,
    source_key: &str,
) -> Result<Built> {
    let channels = config.image_type.channels();
    let policy = config.family.freeze_policy();
    let adapt = derive_seed(seeds.init, "backbone");
    let from_file = |w: &WeightsRef, mode: InitMode| -> Result<Backbone> {
        build_backbone(&w.backbone_spec(mode, channels, policy)?, config.resnet, adapt, DType::F32)
    };
    let mut scenes_read = 0;
    let mut pretrained = None;
    let backbone = match config.family {
        Family::Baseline => None,
        Family::Random => {
            let mut b = Backbone::random(config.resnet, channels, adapt, DType::F32)?;
            b.set_freeze_policy(policy);
            Some(b)
        }
        Family::Transfer | Family::Finetune => {
            Some(from_file(config.imagenet_weights.as_ref().expect("validated"), InitMode::Imagenet)?)
        }
        Family::SimsiamBj | Family::SimsiamDl => {
            Some(from_file(config.external_weights.as_ref().expect("validated"), InitMode::ExternalFile)?)
        }
        Family::Simsiam => match &config.simsiam_weights {
            Some(w) => Some(from_file(w, InitMode::SimsiamLocal)?),
            None => {
                if !cache.pretrained.contains_key(source_key) {
                    let (b, h, n) = pretrain_local(config, seeds, prepared, norm)?;
                    scenes_read += n;
                    cache.pretrained.insert(source_key.to_string(), (b, h));
                }
                let (b, h) = cache.pretrained[source_key].clone();
                pretrained = Some((b.clone(), h));
                Some(b)
            }
        },
    };
    Ok(Built {
        backbone,
        pretrained,
        scenes_read,
    })
}

fn extract<T>(
    samples: &[Sample],
    norm: &NormStats,
    batch: usize,
    mut f: impl FnMut(&[&Raster]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let scenes: Vec<Raster> = chunk.iter().map(|s| load_normalized(&s.scene, norm)).collect::<Result<_>>()?;
        out.extend(f(&scenes.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

fn side_rows(
    config: &ExperimentConfig,
    prepared: &Prepared,
    scaler: &MetScaler,
    forest: Option<&Forest>,
) -> Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> {
    prepared
        .samples
        .iter()
        .map(|s| {
            let met = config
                .features
                .uses_met()
                .then(|| scaler.apply(&s.met).iter().map(|&v| v as f32).collect());
            let emb = forest.map(|f| f.embed_met(&s.met).to_dense());
            (met, emb)
        })
        .collect()
}

fn matrix(rows: Vec<Vec<f32>>) -> Result<(Tensor, usize)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok((Tensor::from_vec(flat, (n, d), &Device::Cpu)?, d))
}

fn evaluate(
    config: &ExperimentConfig,
    seeds: &RunSeeds,
    prepared: &Prepared,
    estimates: &[f64],
) -> Result<(Vec<MetricsReport>, Vec<SplitInterval>, Option<f64>)> {
    let model = format!("{} {}", config.family.label(), config.features);
    let mut reports = Vec::new();
    let mut intervals = Vec::new();
    for split in Split::ALL {
        let idx = prepared.indices(split);
        let y: Vec<f64> = idx.iter().map(|&i| prepared.samples[i].y).collect();
        let yhat: Vec<f64> = idx.iter().map(|&i| estimates[i]).collect();
        reports.push(MetricsReport {
            model: model.clone(),
            target: config.target.as_str().into(),
            split: split.as_str().into(),
            metrics: compute_metrics(&y, &yhat)?,
        });
        let groups: Option<Vec<usize>> = match config.evaluation.resample_unit {
            ResampleUnit::Observation => None,
            ResampleUnit::Day => {
                let mut ids: BTreeMap<NaiveDate, usize> = BTreeMap::new();
                for &i in &idx {
                    let next = ids.len();
                    ids.entry(prepared.samples[i].date).or_insert(next);
                }
                Some(idx.iter().map(|&i| ids[&prepared.samples[i].date]).collect())
            }
        };
        for metric in Metric::ALL {
            let seed = derive_seed(seeds.bootstrap, &format!("{split}/{metric}"));
            let ci = bootstrap_ci(&y, &yhat, metric, config.evaluation.bootstrap_resamples, seed, groups.as_deref())?;
            intervals.push(SplitInterval { split, ci });
        }
    }
    let test: Vec<(String, f64, f64)> = prepared
        .indices(Split::Test)
        .into_iter()
        .map(|i| (prepared.samples[i].station_id.0.clone(), prepared.samples[i].y, estimates[i]))
        .collect();
    let station = if test.is_empty() {
        None
    } else {
        station_mean_skill(&test).ok().map(|(nmae, _)| nmae)
    };
    Ok((reports, intervals, station))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    config_hash: &'a str,
    model: &'a str,
    features: &'a str,
    target: &'a str,
    image_type: &'a str,
    seed: u64,
    split: &'a str,
    n: usize,
    r2: String,
    rmse: String,
    nmae: String,
}

#[derive(Serialize)]
struct IntervalRow<'a> {
    config_hash: &'a str,
    split: &'a str,
    metric: &'a str,
    point: String,
    lower: String,
    upper: String,
    resamples: usize,
    exact: bool,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    config_hash: &'a str,
    station_id: &'a str,
    date: NaiveDate,
    split: &'a str,
    observed: f64,
    estimated: f64,
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    config_hash: &'a str,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    best: bool,
}

fn write_tables(dir: &Path, final_dir: &Path, run: &RunArtifacts) -> Result<Vec<PathBuf>> {
    let h = run.config_hash.as_str();
    let c = &run.config;
    let image = c.image_type.as_str();
    let metrics: Vec<MetricsRow> = run
        .metrics
        .iter()
        .map(|m| MetricsRow {
            config_hash: h,
            model: c.family.label(),
            features: c.features.as_str(),
            target: c.target.as_str(),
            image_type: image,
            seed: c.seed,
            split: &m.split,
            n: m.metrics.n,
            r2: crate::eval::sig4(m.metrics.r2),
            rmse: crate::eval::sig4(m.metrics.rmse),
            nmae: crate::eval::sig4(m.metrics.nmae),
        })
        .collect();
    let intervals: Vec<IntervalRow> = run
        .intervals
        .iter()
        .map(|i| IntervalRow {
            config_hash: h,
            split: i.split.as_str(),
            metric: i.ci.metric.as_str(),
            point: crate::eval::sig4(i.ci.point),
            lower: crate::eval::sig4(i.ci.lower),
            upper: crate::eval::sig4(i.ci.upper),
            resamples: i.ci.resamples,
            exact: i.ci.exact,
        })
        .collect();
    let predictions: Vec<PredictionRow> = run
        .predictions
        .iter()
        .map(|p| PredictionRow {
            config_hash: h,
            station_id: &p.station_id,
            date: p.date,
            split: p.split.as_str(),
            observed: p.observed,
            estimated: p.estimated,
        })
        .collect();
    let hist = &run.history;
    let history: Vec<HistoryRow> = (0..hist.train_loss.len())
        .map(|e| HistoryRow {
            config_hash: h,
            epoch: e + 1,
            train_loss: hist.train_loss[e],
            val_loss: hist.val_loss[e],
            best: e + 1 == hist.best_epoch,
        })
        .collect();
    write_csv(&dir.join("metrics.csv"), &metrics)?;
    write_csv(&dir.join("bootstrap.csv"), &intervals)?;
    write_csv(&dir.join("predictions.csv"), &predictions)?;
    write_csv(&dir.join("history.csv"), &history)?;
    Ok(["metrics.csv", "bootstrap.csv", "predictions.csv", "history.csv"]
        .iter()
        .map(|f| final_dir.join(f))
        .collect())
}

/// Runs one experiment with a fresh cache. Artifacts go to
/// `out/<run name>_<config hash>/`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    run_experiment_cached(config, out, &mut RunCache::new())
}

/// Runs one experiment: preparation, optional SimSiam pre-training, backbone
/// build, feature extraction, supervised training, evaluation on all three
/// splits and artifact emission. Artifacts are assembled in a staging
/// directory that is renamed into place on success and removed on failure.
pub fn run_experiment_cached(config: &ExperimentConfig, out: &Path, cache: &mut RunCache) -> Result<RunArtifacts> {
    let config = config.resolved();
    config.validate().stage("config")?;
    let hash = config.hash();
    let name = format!("{}_{}", config.run_name(), hash);
    let final_dir = out.join(&name);
    let staging = out.join(format!(".staging-{name}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e)).stage("artifacts")?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e)).stage("artifacts")?;
    let result = execute(&config, &hash, &staging, &final_dir, cache);
    match result {
        Ok(run) => {
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e)).stage("artifacts")?;
            }
            fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e)).stage("artifacts")?;
            log::info!("{name}: test {:?}", run.metrics(Split::Test).map(|m| &m.metrics));
            Ok(run)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn execute(
    config: &ExperimentConfig,
    hash: &str,
    staging: &Path,
    final_dir: &Path,
    cache: &mut RunCache,
) -> Result<RunArtifacts> {
    let seeds = RunSeeds::from_root(config.seed);
    let prepared = prepare(config).stage("prepare")?;
    let train_idx = prepared.indices(Split::Train);
    let train_met: Vec<[f64; MET_DIM]> = train_idx.iter().map(|&i| prepared.samples[i].met.to_array()).collect();
    let scaler = MetScaler::fit(&train_met).stage("prepare")?;
    let forest = if config.features.uses_embedding() {
        Some(fit_embedding(&train_met, &config.embedding.forest_spec(seeds.embedding)).stage("embedding")?)
    } else {
        None
    };
    let sides = side_rows(config, &prepared, &scaler, forest.as_ref());

    let mut scenes_read = 0;
    let norm = if config.family.uses_images() {
        let n = train_norm_stats(config, &prepared).stage("prepare")?;
        scenes_read += prepared.scenes(config, Some(Split::Train)).len();
        Some(n)
    } else {
        None
    };

    let source = backbone_source(config, &seeds, &prepared);
    let source_key = digest(&serde_json::json!({
        "source": source,
        "resnet": config.resnet,
        "image_type": config.image_type,
        "norm": norm,
    }));
    let built = match &norm {
        Some(norm) => {
            let stage = if config.family == Family::Simsiam { "pretrain" } else { "backbone" };
            build_family_backbone(config, &seeds, &prepared, norm, cache, &source_key).stage(stage)?
        }
        None => Built {
            backbone: None,
            pretrained: None,
            scenes_read: 0,
        },
    };
    scenes_read += built.scenes_read;
    let mut backbone = built.backbone;

    let scene_key = |kind: &str| {
        let paths: Vec<&PathBuf> = prepared.samples.iter().map(|s| &s.scene).collect();
        digest(&serde_json::json!({ "kind": kind, "source": source_key, "scenes": paths }))
    };
    let inputs = match (&backbone, &norm) {
        (None, _) | (_, None) => {
            let rows: Vec<Vec<f32>> = sides
                .iter()
                .map(|(m, e)| fuse_features(None, m.as_deref(), e.as_deref()))
                .collect::<Result<_>>()
                .stage("features")?;
            let (t, d) = matrix(rows).stage("features")?;
            ModelInputs {
                matrix: Some(t),
                trunks: None,
                dim: d,
            }
        }
        (Some(b), Some(norm)) if config.family.fine_tunes() => {
            let key = scene_key("trunk");
            if !cache.trunks.contains_key(&key) {
                let t = extract(&prepared.samples, norm, config.feature_batch, |s| b.extract_trunk(s, config.feature_batch))
                    .stage("features")?;
                scenes_read += prepared.samples.len();
                cache.trunks.insert(key.clone(), t);
            }
            let side: Vec<Vec<f32>> = sides
                .iter()
                .map(|(m, e)| m.clone().or_else(|| e.clone()).unwrap_or_default())
                .collect();
            let side_dim = side.first().map_or(0, Vec::len);
            let matrix = if side_dim > 0 { Some(matrix(side).stage("features")?.0) } else { None };
            ModelInputs {
                matrix,
                trunks: Some(cache.trunks[&key].clone()),
                dim: b.feature_dim() + side_dim,
            }
        }
        (Some(b), Some(norm)) => {
            let key = scene_key("features");
            if !cache.features.contains_key(&key) {
                let f = extract(&prepared.samples, norm, config.feature_batch, |s| b.extract_features(s, config.feature_batch))
                    .stage("features")?;
                scenes_read += prepared.samples.len();
                cache.features.insert(key.clone(), f);
            }
            let rows: Vec<Vec<f32>> = cache.features[&key]
                .iter()
                .zip(&sides)
                .map(|(img, (m, e))| fuse_features(Some(img), m.as_deref(), e.as_deref()))
                .collect::<Result<_>>()
                .stage("features")?;
            let (t, d) = matrix(rows).stage("features")?;
            ModelInputs {
                matrix: Some(t),
                trunks: None,
                dim: d,
            }
        }
    };

    let head = build_head(HeadSpec::new(inputs.dim), derive_seed(seeds.init, "head"), DType::F32).stage("train")?;
    let before = backbone.as_ref().map(|b| store_digest(&b.store)).transpose().stage("train")?;
    let val_idx = prepared.indices(Split::Val);
    let targets = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| prepared.samples[i].y).collect() };
    let all_idx: Vec<usize> = (0..prepared.samples.len()).collect();
    let train_cfg = config.train.train_config(seeds.shuffle);
    let (history, estimates) = {
        let model: Box<dyn Regressor + '_> = match (&inputs.trunks, &backbone) {
            (Some(trunk), Some(b)) => Box::new(FineTuneModel {
                backbone: b,
                head: &head,
                trunk,
                side: inputs.matrix.as_ref(),
            }),
            _ => Box::new(HeadModel {
                head: &head,
                features: inputs.matrix.as_ref().expect("frozen families have a feature matrix"),
            }),
        };
        let history = train_supervised(
            model.as_ref(),
            (&train_idx, &targets(&train_idx)),
            (&val_idx, &targets(&val_idx)),
            &train_cfg,
        )
        .stage("train")?;
        let estimates = predict_all(model.as_ref(), &all_idx, 256).stage("evaluate")?;
        (history, estimates)
    };
    let after = backbone.as_ref().map(|b| store_digest(&b.store)).transpose().stage("train")?;

    let (metrics, intervals, station) = evaluate(config, &seeds, &prepared, &estimates).stage("evaluate")?;

    let predictions: Vec<Prediction> = prepared
        .samples
        .iter()
        .zip(&estimates)
        .map(|(s, &e)| Prediction {
            station_id: s.station_id.0.clone(),
            date: s.date,
            split: s.split,
            observed: s.y,
            estimated: e,
        })
        .collect();

    let artifacts = (|| -> Result<RunArtifacts> {
        let snapshot = format!("# config_hash = \"{hash}\"\n{}", config.to_toml()?);
        let snap_path = staging.join("config.toml");
        fs::write(&snap_path, snapshot).map_err(|e| Error::io(&snap_path, e))?;

        let mut meta = BTreeMap::from([
            ("config_hash".to_string(), hash.to_string()),
            ("config".to_string(), serde_json::to_string(config)?),
            ("head_spec".to_string(), serde_json::to_string(&head.spec)?),
            ("met_scaler".to_string(), serde_json::to_string(&scaler)?),
            ("norm_stats".to_string(), serde_json::to_string(&norm)?),
            ("train_history".to_string(), serde_json::to_string(&history)?),
        ]);
        if let Some(f) = &forest {
            meta.insert("forest".into(), serde_json::to_string(f)?);
        }
        let mut store = ParamStore::new(DType::F32);
        store.absorb("head.", head.store.clone());
        if let Some(b) = backbone.as_mut().filter(|_| config.family.fine_tunes()) {
            let mut tuned = b.store.clone();
            let frozen: Vec<String> = tuned
                .iter()
                .filter(|(n, _)| !n.starts_with("layer4."))
                .map(|(n, _)| n.to_string())
                .collect();
            for n in frozen {
                tuned.remove(&n);
            }
            store.absorb("backbone.", tuned);
        }
        store.save(&staging.join("checkpoint.safetensors"), "checkpoint", &meta)?;

        let pretrained_backbone = match &built.pretrained {
            Some((b, h)) => {
                let mut m = pretrain_metadata(&config.simsiam, seeds.pretrain, h)?;
                m.insert("config_hash".into(), hash.to_string());
                b.save(&staging.join("pretrained_backbone.safetensors"), &m)?;
                Some(final_dir.join("pretrained_backbone.safetensors"))
            }
            None => None,
        };

        let mut run = RunArtifacts {
            config: config.clone(),
            config_hash: hash.to_string(),
            dir: final_dir.to_path_buf(),
            checkpoint: final_dir.join("checkpoint.safetensors"),
            config_snapshot: final_dir.join("config.toml"),
            pretrained_backbone,
            metrics,
            intervals,
            station_mean_nmae: station,
            history,
            predictions,
            plots: Vec::new(),
            tables: Vec::new(),
            backbone_digest: before.zip(after),
            n_scenes_read: scenes_read,
        };
        run.tables = write_tables(staging, final_dir, &run)?;
        let limits = report::axis_limits(run.predictions.iter().flat_map(|p| [p.observed, p.estimated]));
        report::scatter_plot(&staging.join("scatter.svg"), &run, limits)?;
        report::loss_plot(&staging.join("loss.svg"), &run)?;
        run.plots = vec![final_dir.join("scatter.svg"), final_dir.join("loss.svg")];
        let p = staging.join("run.json");
        fs::write(&p, serde_json::to_vec_pretty(&run)?).map_err(|e| Error::io(&p, e))?;
        Ok(run)
    })()
    .stage("artifacts")?;
    Ok(artifacts)
}

/// The results-table configs for every target: one per table row and
/// target, all sharing `base`'s data, weights, seed and overrides.
pub fn matrix_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for (family, features) in TABLE_ROWS {
        for target in crate::dataset::Target::ALL {
            let mut c = base.clone();
            c.family = family;
            c.features = features;
            c.target = target;
            out.push(c);
        }
    }
    out
}

/// Runs `configs` sequentially with a shared cache.
pub fn run_matrix(configs: &[ExperimentConfig], out: &Path) -> Result<Vec<RunArtifacts>> {
    let mut cache = RunCache::new();
    configs.iter().map(|c| run_experiment_cached(c, out, &mut cache)).collect()
}

/// Writes the split assignment, filter audit, ingest counts and train-split
/// image statistics of a config under `out`.
pub fn write_preparation(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let config = config.resolved();
    let prepared = prepare(&config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct SplitRow {
        date: NaiveDate,
        split: Split,
    }
    let splits: Vec<SplitRow> = prepared
        .splits
        .by_date
        .iter()
        .map(|(&date, &split)| SplitRow { date, split })
        .collect();
    let mut files = vec![out.join("splits.csv"), out.join("filter_audit.csv"), out.join("ingest.json")];
    write_csv(&files[0], &splits)?;
    write_csv(&files[1], &prepared.corpus.audit)?;
    let summary = serde_json::json!({
        "report": prepared.corpus.report,
        "samples": prepared.samples.len(),
        "split_dates": Split::ALL.map(|s| (s.as_str(), prepared.splits.count(s))),
        "split_samples": Split::ALL.map(|s| (s.as_str(), prepared.indices(s).len())),
    });
    fs::write(&files[2], serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&files[2], e))?;
    if !prepared.scenes(&config, Some(Split::Train)).is_empty() {
        let norm = train_norm_stats(&config, &prepared)?;
        let p = out.join("norm_stats.json");
        fs::write(&p, serde_json::to_vec_pretty(&norm)?).map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(files)
}

/// Pre-trains a SimSiam backbone on the config's pre-training corpus and
/// saves it as `out/simsiam_<image>_s<seed>_<hash>.safetensors`, ready to be
/// referenced as `simsiam_weights`.
pub fn pretrain(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let config = config.resolved();
    let seeds = RunSeeds::from_root(config.seed);
    let prepared = prepare(&config).stage("prepare")?;
    let norm = train_norm_stats(&config, &prepared).stage("prepare")?;
    let (backbone, history, _) = pretrain_local(&config, &seeds, &prepared, &norm).stage("pretrain")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = config.hash();
    let path = out.join(format!(
        "simsiam_{}_s{}_{hash}.safetensors",
        config.image_type.as_str().to_ascii_lowercase(),
        config.seed
    ));
    let mut meta = pretrain_metadata(&config.simsiam, seeds.pretrain, &history)?;
    meta.insert("config_hash".into(), hash);
    meta.insert("norm_stats".into(), serde_json::to_string(&norm)?);
    backbone.save(&path, &meta).stage("artifacts")?;
    Ok(path)
}
