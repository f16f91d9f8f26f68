//! Declarative description of one experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, FreezePolicy, InitMode, ResNetConfig};
use crate::contrastive::SimSiamSpec;
use crate::dataset::{DataPaths, FilterConfig, ImageType, Target};
use crate::error::{Error, Result};
use crate::eval::{ResampleUnit, DEFAULT_RESAMPLES};
use crate::head::TrainConfig;
use crate::metembed::ForestSpec;
use crate::nn::NameMap;

/// Replaces `data_dir` of every config when set.
pub const DATA_ROOT_ENV: &str = "AIRSAT_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    Random,
    Transfer,
    Finetune,
    Simsiam,
    SimsiamBj,
    SimsiamDl,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Baseline,
        Family::Random,
        Family::Transfer,
        Family::Finetune,
        Family::Simsiam,
        Family::SimsiamBj,
        Family::SimsiamDl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Baseline => "baseline",
            Family::Random => "random",
            Family::Transfer => "transfer",
            Family::Finetune => "finetune",
            Family::Simsiam => "simsiam",
            Family::SimsiamBj => "simsiam_bj",
            Family::SimsiamDl => "simsiam_dl",
        }
    }

    /// Model name as printed in the report table.
    pub fn label(self) -> &'static str {
        match self {
            Family::Baseline => "Baseline",
            Family::Random => "Random",
            Family::Transfer => "Transfer",
            Family::Finetune => "Fine-tuning",
            Family::Simsiam => "SimSiam",
            Family::SimsiamBj => "SimSiam BJ",
            Family::SimsiamDl => "SimSiam DL",
        }
    }

    pub fn uses_images(self) -> bool {
        self != Family::Baseline
    }

    pub fn freeze_policy(self) -> FreezePolicy {
        match self {
            Family::Finetune | Family::SimsiamBj | Family::SimsiamDl => FreezePolicy::TuneBlock4Avgpool,
            _ => FreezePolicy::AllFrozen,
        }
    }

    pub fn fine_tunes(self) -> bool {
        self.freeze_policy() == FreezePolicy::TuneBlock4Avgpool
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown model family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    #[serde(rename = "M")]
    Met,
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "I+M")]
    ImageMet,
    #[serde(rename = "I+H")]
    ImageEmbedding,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [
        FeatureSet::Met,
        FeatureSet::Image,
        FeatureSet::ImageMet,
        FeatureSet::ImageEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Met => "M",
            FeatureSet::Image => "I",
            FeatureSet::ImageMet => "I+M",
            FeatureSet::ImageEmbedding => "I+H",
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> &'static str {
        match self {
            FeatureSet::Met => "m",
            FeatureSet::Image => "i",
            FeatureSet::ImageMet => "im",
            FeatureSet::ImageEmbedding => "ih",
        }
    }

    pub fn uses_images(self) -> bool {
        self != FeatureSet::Met
    }

    pub fn uses_met(self) -> bool {
        matches!(self, FeatureSet::Met | FeatureSet::ImageMet)
    }

    pub fn uses_embedding(self) -> bool {
        self == FeatureSet::ImageEmbedding
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_uppercase();
        FeatureSet::ALL
            .into_iter()
            .find(|f| f.as_str() == s || f.slug().to_ascii_uppercase() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown feature set `{s}`")))
    }
}

/// Model/feature rows of the results table, in table order.
pub const TABLE_ROWS: [(Family, FeatureSet); 15] = [
    (Family::Baseline, FeatureSet::Met),
    (Family::Random, FeatureSet::ImageMet),
    (Family::Transfer, FeatureSet::ImageMet),
    (Family::Finetune, FeatureSet::ImageMet),
    (Family::Transfer, FeatureSet::ImageEmbedding),
    (Family::Finetune, FeatureSet::ImageEmbedding),
    (Family::Simsiam, FeatureSet::ImageMet),
    (Family::SimsiamBj, FeatureSet::ImageMet),
    (Family::SimsiamDl, FeatureSet::ImageMet),
    (Family::Random, FeatureSet::Image),
    (Family::Transfer, FeatureSet::Image),
    (Family::Finetune, FeatureSet::Image),
    (Family::Simsiam, FeatureSet::Image),
    (Family::SimsiamBj, FeatureSet::Image),
    (Family::SimsiamDl, FeatureSet::Image),
];

/// A weight archive on disk, optionally pinned by its sha256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsRef {
    pub path: PathBuf,
    #[serde(default)]
    pub sha256: Option<String>,
    /// JSON name map for archives not in the torchvision layout.
    #[serde(default)]
    pub name_map: Option<PathBuf>,
}

impl WeightsRef {
    pub fn new(path: impl Into<PathBuf>, sha256: Option<String>) -> Self {
        WeightsRef {
            path: path.into(),
            sha256,
            name_map: None,
        }
    }

    pub fn backbone_spec(&self, init_mode: InitMode, in_channels: usize, policy: FreezePolicy) -> Result<BackboneSpec> {
        let name_map = self.name_map.as_deref().map(NameMap::load).transpose()?;
        Ok(BackboneSpec {
            init_mode,
            in_channels,
            freeze_policy: policy,
            weights_path: Some(self.path.clone()),
            weights_sha256: self.sha256.clone(),
            name_map,
        })
    }
}

/// Images used for local SimSiam pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainCorpus {
    /// Clear train-split images, with or without observations.
    #[default]
    Train,
    /// Every clear image, validation and test included.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            max_epochs: d.max_epochs,
            early_stop_patience: d.early_stop_patience,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSettings {
    pub n_trees: usize,
    pub max_depth: usize,
    pub max_features: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        let d = ForestSpec::new(0);
        EmbeddingSettings {
            n_trees: d.n_trees,
            max_depth: d.max_depth,
            max_features: d.max_features,
        }
    }
}

impl EmbeddingSettings {
    pub fn forest_spec(&self, seed: u64) -> ForestSpec {
        ForestSpec {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            max_features: self.max_features,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub bootstrap_resamples: usize,
    pub resample_unit: ResampleUnit,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bootstrap_resamples: DEFAULT_RESAMPLES,
            resample_unit: ResampleUnit::Observation,
        }
    }
}

fn default_feature_batch() -> usize {
    4
}

/// One run: target × model family × feature set × image type × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: Target,
    pub family: Family,
    pub features: FeatureSet,
    pub image_type: ImageType,
    pub seed: u64,
    /// Directory holding scenes.csv, met.csv and aq.csv.
    pub data_dir: PathBuf,
    /// Cloud filter TOML; the bundled filter when absent.
    #[serde(default)]
    pub cloud_filter: Option<PathBuf>,
    /// Backbone weights of the transfer and fine-tuning families.
    #[serde(default)]
    pub imagenet_weights: Option<WeightsRef>,
    /// Contrastive weights of the simsiam_bj / simsiam_dl families.
    #[serde(default)]
    pub external_weights: Option<WeightsRef>,
    /// A locally pre-trained SimSiam backbone; pre-trained in the run when absent.
    #[serde(default)]
    pub simsiam_weights: Option<WeightsRef>,
    #[serde(default)]
    pub pretrain_corpus: PretrainCorpus,
    /// Images per feature-extraction forward pass.
    #[serde(default = "default_feature_batch")]
    pub feature_batch: usize,
    #[serde(default)]
    pub resnet: ResNetConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub simsiam: SimSiamSpec,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default)]
    pub evaluation: EvalSettings,
}

impl ExperimentConfig {
    pub fn new(
        target: Target,
        family: Family,
        features: FeatureSet,
        image_type: ImageType,
        seed: u64,
        data_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            target,
            family,
            features,
            image_type,
            seed,
            data_dir: data_dir.into(),
            cloud_filter: None,
            imagenet_weights: None,
            external_weights: None,
            simsiam_weights: None,
            pretrain_corpus: PretrainCorpus::Train,
            feature_batch: default_feature_batch(),
            resnet: ResNetConfig::resnet50(),
            train: TrainSettings::default(),
            simsiam: SimSiamSpec::default(),
            embedding: EmbeddingSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (family, features) = (self.family, self.features);
        if (family == Family::Baseline) != (features == FeatureSet::Met) {
            return bad(format!(
                "features {features} with family {family}: M goes with baseline only"
            ));
        }
        if features == FeatureSet::ImageEmbedding && !matches!(family, Family::Transfer | Family::Finetune) {
            return bad(format!("features I+H apply to transfer and finetune, not {family}"));
        }
        if matches!(family, Family::Transfer | Family::Finetune) && self.imagenet_weights.is_none() {
            return bad(format!("family {family} needs imagenet_weights"));
        }
        if matches!(family, Family::SimsiamBj | Family::SimsiamDl) && self.external_weights.is_none() {
            return bad(format!("family {family} needs external_weights"));
        }
        if self.feature_batch == 0 {
            return bad("feature_batch must be >= 1".into());
        }
        if self.evaluation.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be >= 1".into());
        }
        if self.resnet.width == 0 || self.resnet.blocks.contains(&0) {
            return bad(format!("invalid resnet {:?}", self.resnet));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 || !(self.train.learning_rate > 0.0) {
            return bad(format!("invalid training settings {:?}", self.train));
        }
        let s = &self.simsiam;
        if s.epochs == 0 || s.batch_size == 0 || s.view_size == 0 {
            return bad(format!("invalid simsiam settings {s:?}"));
        }
        if self.embedding.n_trees == 0 || self.embedding.max_depth == 0 || self.embedding.max_features == 0 {
            return bad(format!("invalid embedding settings {:?}", self.embedding));
        }
        Ok(())
    }

    /// The config as actually run: `data_dir` replaced by the
    /// environment override when present.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            c.data_dir = PathBuf::from(root);
        }
        c
    }

    /// First 16 hex digits of the sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Directory name of the run's artifacts.
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_{}_{}_s{}",
            self.family,
            self.features.slug(),
            self.target,
            self.image_type.as_str().to_ascii_lowercase(),
            self.seed
        )
    }

    pub fn data_paths(&self) -> DataPaths {
        DataPaths::in_dir(&self.data_dir)
    }

    pub fn filter(&self) -> Result<FilterConfig> {
        match &self.cloud_filter {
            Some(p) => FilterConfig::load(p),
            None => Ok(FilterConfig::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: Family, features: FeatureSet) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(Target::OpAa, family, features, ImageType::Rgb, 1, "data");
        c.imagenet_weights = Some(WeightsRef::new("w.safetensors", None));
        c.external_weights = Some(WeightsRef::new("bj.safetensors", None));
        c
    }

    #[test]
    fn table_rows_are_valid_configs() {
        for (family, features) in TABLE_ROWS {
            cfg(family, features).validate().unwrap();
        }
        assert_eq!(TABLE_ROWS.len(), 15);
    }

    #[test]
    fn invariants_reject_bad_combinations() {
        assert!(cfg(Family::Baseline, FeatureSet::ImageMet).validate().is_err());
        assert!(cfg(Family::Transfer, FeatureSet::Met).validate().is_err());
        assert!(cfg(Family::Simsiam, FeatureSet::ImageEmbedding).validate().is_err());
        assert!(cfg(Family::Random, FeatureSet::ImageEmbedding).validate().is_err());
        let mut c = cfg(Family::SimsiamDl, FeatureSet::Image);
        c.external_weights = None;
        assert!(c.validate().is_err());
        let mut c = cfg(Family::Finetune, FeatureSet::Image);
        c.imagenet_weights = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = cfg(Family::Transfer, FeatureSet::ImageEmbedding);
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 2;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            "target = \"pm10\"\nfamily = \"baseline\"\nfeatures = \"M\"\nimage_type = \"RGB\"\nseed = 3\ndata_dir = \"d\"\n",
        )
        .unwrap();
        assert_eq!(c.train, TrainSettings::default());
        assert_eq!(c.resnet, ResNetConfig::resnet50());
        assert!(ExperimentConfig::from_toml("target = \"pm10\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn names_parse_back() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        for f in FeatureSet::ALL {
            assert_eq!(f.as_str().parse::<FeatureSet>().unwrap(), f);
        }
    }
}
