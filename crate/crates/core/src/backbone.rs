//! ResNet50-topology feature extractor with pluggable initialisation, an
//! optional fourth input channel and freeze policies.
//!
//! Tensor names follow the torchvision layout (`conv1.weight`,
//! `layer4.2.bn3.running_var`, ...), so converted torchvision checkpoints
//! load without a name map.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Raster;
use crate::error::{Error, Result};
use crate::nn::{
    self, add_batch_norm, add_conv, batch_norm, conv2d, Archive, Init, NameMap, ParamStore,
};
use crate::seed::derive_seed;

pub const FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Imagenet,
    SimsiamLocal,
    ExternalFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    AllFrozen,
    TuneBlock4Avgpool,
    AllTrainable,
}

/// Widths and depths of the residual network. `resnet50()` is the standard
/// topology; narrower variants keep the same structure for fast tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub width: usize,
    pub blocks: [usize; 4],
}

impl ResNetConfig {
    pub const EXPANSION: usize = 4;

    pub fn resnet50() -> Self {
        ResNetConfig {
            width: 64,
            blocks: [3, 4, 6, 3],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.width * 8 * Self::EXPANSION
    }
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self::resnet50()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub init_mode: InitMode,
    pub in_channels: usize,
    pub freeze_policy: FreezePolicy,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Whole-file sha256 pin for `weights_path`.
    #[serde(default)]
    pub weights_sha256: Option<String>,
    #[serde(default)]
    pub name_map: Option<NameMap>,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(Error::Config(format!(
                "backbone input channels must be 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.init_mode != InitMode::Random && self.weights_path.is_none() {
            return Err(Error::Config(format!(
                "{:?} initialisation needs a weights path",
                self.init_mode
            )));
        }
        Ok(())
    }
}

/// Batch-statistics behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics everywhere.
    Eval,
    /// Batch statistics in Block4 only.
    Block4,
    /// Batch statistics everywhere.
    Train,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ResNetConfig,
    pub in_channels: usize,
    pub policy: FreezePolicy,
    pub store: ParamStore,
}

fn block_prefixes(config: &ResNetConfig) -> Vec<(usize, usize, String)> {
    let mut v = Vec::new();
    for (l, &n) in config.blocks.iter().enumerate() {
        for i in 0..n {
            v.push((l, i, format!("layer{}.{}", l + 1, i)));
        }
    }
    v
}

fn init_store(config: &ResNetConfig, in_channels: usize, seed: u64, dtype: DType) -> Result<ParamStore> {
    let init = Init { seed };
    let mut s = ParamStore::new(dtype);
    let w = config.width;
    add_conv(&mut s, &init, "conv1.weight", [w, in_channels, 7, 7])?;
    add_batch_norm(&mut s, "bn1", w, true)?;
    let mut inplanes = w;
    for (l, i, p) in block_prefixes(config) {
        let planes = w << l;
        let out = planes * ResNetConfig::EXPANSION;
        let cin = if i == 0 { inplanes } else { out };
        add_conv(&mut s, &init, &format!("{p}.conv1.weight"), [planes, cin, 1, 1])?;
        add_batch_norm(&mut s, &format!("{p}.bn1"), planes, true)?;
        add_conv(&mut s, &init, &format!("{p}.conv2.weight"), [planes, planes, 3, 3])?;
        add_batch_norm(&mut s, &format!("{p}.bn2"), planes, true)?;
        add_conv(&mut s, &init, &format!("{p}.conv3.weight"), [out, planes, 1, 1])?;
        add_batch_norm(&mut s, &format!("{p}.bn3"), out, true)?;
        if i == 0 {
            add_conv(&mut s, &init, &format!("{p}.downsample.0.weight"), [out, cin, 1, 1])?;
            add_batch_norm(&mut s, &format!("{p}.downsample.1"), out, true)?;
            inplanes = out;
        }
    }
    Ok(s)
}

/// Name map for torchvision ResNet checkpoints: drops the classifier and
/// the batch counters.
pub fn torchvision_name_map() -> NameMap {
    NameMap {
        strip_prefix: None,
        rename: BTreeMap::new(),
        ignore_prefixes: vec!["fc.".into()],
        ignore_suffixes: vec!["num_batches_tracked".into()],
    }
}

impl Backbone {
    /// Randomly initialised network (fan-out He-normal convolutions, unit
    /// batch-norm scale, zero shift).
    pub fn random(config: ResNetConfig, in_channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let store = init_store(&config, 3, seed, dtype)?;
        let mut b = Backbone {
            config,
            in_channels: 3,
            policy: FreezePolicy::AllTrainable,
            store,
        };
        if in_channels == 4 {
            b.adapt_input_channels(4, derive_seed(seed, "adapt"))?;
        }
        Ok(b)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Loads an archive into a freshly built network, applying the channel
    /// adaptation first when the archive is 4-channel, or afterwards when it
    /// is 3-channel and `in_channels == 4`.
    pub fn from_archive(
        config: ResNetConfig,
        in_channels: usize,
        archive: &Archive,
        map: &NameMap,
        path: &Path,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let conv1 = archive
            .tensors
            .iter()
            .find(|(k, _)| map.apply(k).as_deref() == Some("conv1.weight"))
            .map(|(_, t)| t.dims().to_vec())
            .ok_or_else(|| Error::weights(path, "tensor conv1.weight: missing from archive"))?;
        let archive_channels = conv1.get(1).copied().unwrap_or(0);
        if archive_channels != 3 && archive_channels != 4 {
            return Err(Error::weights(
                path,
                format!("tensor conv1.weight: {archive_channels} input channels"),
            ));
        }
        if archive_channels == 4 && in_channels == 3 {
            return Err(Error::weights(
                path,
                "tensor conv1.weight: 4-channel weights for a 3-channel model",
            ));
        }
        let store = init_store(&config, archive_channels, seed, dtype)?;
        store.load_archive(archive, map, path, false)?;
        let mut b = Backbone {
            config,
            in_channels: archive_channels,
            policy: FreezePolicy::AllTrainable,
            store,
        };
        if in_channels == 4 && archive_channels == 3 {
            b.adapt_input_channels(4, derive_seed(seed, "adapt"))?;
        }
        Ok(b)
    }

    /// Adds a fourth input channel to the first convolution. The new slice
    /// is drawn like the original layer's init; the first three slices are
    /// copied unchanged.
    pub fn adapt_input_channels(&mut self, new_in: usize, seed: u64) -> Result<()> {
        if self.in_channels != 3 || new_in != 4 {
            return Err(Error::InvalidInput(format!(
                "channel adaptation is 3 -> 4, backbone has {} and {new_in} was requested",
                self.in_channels
            )));
        }
        let p = self.store.param("conv1.weight")?;
        let trainable = p.trainable;
        let w = p.var.as_tensor().detach();
        let (out, _, kh, kw) = w.dims4()?;
        let fan_shape = [out, 1, kh, kw];
        let extra = Init { seed }.kaiming_normal_fan_out("conv1.weight.extra", &fan_shape);
        let extra = Tensor::from_vec(extra, &fan_shape, &Device::Cpu)?.to_dtype(w.dtype())?;
        let adapted = Tensor::cat(&[&w, &extra], 1)?;
        self.store.insert("conv1.weight", adapted, nn::ParamKind::Weight)?;
        if !trainable {
            let policy = self.policy;
            self.set_freeze_policy(policy);
        }
        self.in_channels = 4;
        Ok(())
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        self.policy = policy;
        match policy {
            FreezePolicy::AllFrozen => self.store.set_trainable(|_| false),
            FreezePolicy::TuneBlock4Avgpool => self.store.set_trainable(|n| n.starts_with("layer4.")),
            FreezePolicy::AllTrainable => self.store.set_trainable(|_| true),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.in_channels {
            return Err(Error::InvalidInput(format!(
                "backbone expects (N, {}, H, W), got {:?}",
                self.in_channels, dims
            )));
        }
        Ok(())
    }

    /// First convolution only (pre batch-norm); used to check adaptation.
    pub fn conv1(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        conv2d(x, &self.store, "conv1.weight", 2, 3)
    }

    fn bottleneck(&self, x: &Tensor, l: usize, i: usize, p: &str, train: bool) -> Result<Tensor> {
        let s = &self.store;
        let stride = if l > 0 && i == 0 { 2 } else { 1 };
        let y = conv2d(x, s, &format!("{p}.conv1.weight"), 1, 0)?;
        let y = batch_norm(&y, s, &format!("{p}.bn1"), train)?.relu()?;
        let y = conv2d(&y, s, &format!("{p}.conv2.weight"), stride, 1)?;
        let y = batch_norm(&y, s, &format!("{p}.bn2"), train)?.relu()?;
        let y = conv2d(&y, s, &format!("{p}.conv3.weight"), 1, 0)?;
        let y = batch_norm(&y, s, &format!("{p}.bn3"), train)?;
        let identity = if i == 0 {
            let d = conv2d(x, s, &format!("{p}.downsample.0.weight"), stride, 0)?;
            batch_norm(&d, s, &format!("{p}.downsample.1"), train)?
        } else {
            x.clone()
        };
        Ok((y + identity)?.relu()?)
    }

    /// Conv1 through Block3.
    pub fn trunk(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.check_input(x)?;
        let train = mode == BnMode::Train;
        let y = conv2d(x, &self.store, "conv1.weight", 2, 3)?;
        let y = batch_norm(&y, &self.store, "bn1", train)?.relu()?;
        let mut y = nn::max_pool_3x3_s2(&y)?;
        for (l, i, p) in block_prefixes(&self.config) {
            if l < 3 {
                y = self.bottleneck(&y, l, i, &p, train)?;
            }
        }
        Ok(y)
    }

    /// Block4 and global average pooling on trunk activations.
    pub fn head_block(&self, trunk: &Tensor, mode: BnMode) -> Result<Tensor> {
        let train = mode != BnMode::Eval;
        let mut y = trunk.clone();
        for (l, i, p) in block_prefixes(&self.config) {
            if l == 3 {
                y = self.bottleneck(&y, l, i, &p, train)?;
            }
        }
        nn::global_avg_pool(&y)
    }

    /// (N, C, H, W) → (N, feature_dim).
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.head_block(&self.trunk(x, mode)?, mode)
    }

    /// Eval-mode features of normalised rasters, computed in batches.
    pub fn extract_features(&self, scenes: &[&Raster], batch: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(batch.max(1)) {
            let x = rasters_to_tensor(chunk, self.store.dtype())?;
            let f = self.forward(&x, BnMode::Eval)?.to_dtype(DType::F32)?;
            out.extend(f.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Eval-mode trunk activations, one (C, H, W) tensor per scene.
    pub fn extract_trunk(&self, scenes: &[&Raster], batch: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(batch.max(1)) {
            let x = rasters_to_tensor(chunk, self.store.dtype())?;
            let t = self.trunk(&x, BnMode::Eval)?;
            for i in 0..chunk.len() {
                out.push(t.get(i)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("resnet".into(), serde_json::to_string(&self.config)?);
        meta.insert("in_channels".into(), self.in_channels.to_string());
        self.store.save(path, "backbone", &meta)
    }
}

/// Stacks rasters of equal shape into an (N, C, H, W) tensor.
pub fn rasters_to_tensor(scenes: &[&Raster], dtype: DType) -> Result<Tensor> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidInput("no scenes to stack".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(scenes.len() * c * h * w);
    for r in scenes {
        if (r.channels, r.height, r.width) != (c, h, w) {
            return Err(Error::InvalidInput("scenes differ in shape".into()));
        }
        data.extend_from_slice(&r.data);
    }
    Ok(Tensor::from_vec(data, (scenes.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Builds a backbone per `spec`. Random mode draws weights from `seed`;
/// every other mode loads `spec.weights_path`.
pub fn build_backbone(spec: &BackboneSpec, config: ResNetConfig, seed: u64, dtype: DType) -> Result<Backbone> {
    spec.validate()?;
    let mut b = match spec.init_mode {
        InitMode::Random => Backbone::random(config, spec.in_channels, seed, dtype)?,
        _ => {
            let path = spec.weights_path.as_deref().expect("validated");
            let archive = Archive::read(path, spec.weights_sha256.as_deref())?;
            let map = spec.name_map.clone().unwrap_or_else(torchvision_name_map);
            Backbone::from_archive(config, spec.in_channels, &archive, &map, path, seed, dtype)?
        }
    };
    b.set_freeze_policy(spec.freeze_policy);
    Ok(b)
}
