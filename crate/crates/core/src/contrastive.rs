//! SimSiam self-supervised pre-training.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{rasters_to_tensor, Backbone, BnMode, FreezePolicy};
use crate::dataset::Raster;
use crate::error::{Error, Result};
use crate::nn::{self, add_batch_norm, add_linear, batch_norm, linear, Init, ParamStore};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSiamSpec {
    pub crop_scale: (f64, f64),
    pub view_size: usize,
    pub hflip_p: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Projector width; `None` uses the backbone feature dimension.
    pub proj_dim: Option<usize>,
    pub pred_hidden: usize,
}

impl Default for SimSiamSpec {
    fn default() -> Self {
        SimSiamSpec {
            crop_scale: (0.2, 1.0),
            view_size: 96,
            hflip_p: 0.5,
            epochs: 100,
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            proj_dim: None,
            pred_hidden: 512,
        }
    }
}

impl SimSiamSpec {
    /// Cosine-annealed learning rate for 0-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos()) / 2.0
    }
}

/// Placement of one sampled crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
    pub flipped: bool,
    pub area_fraction: f64,
}

/// Samples a square crop whose area fraction is uniform in `scale` (the side
/// is rounded to whole pixels and kept inside the range), at a uniform
/// location, with a horizontal flip of probability `hflip_p`.
pub fn sample_crop(height: usize, width: usize, spec: &SimSiamSpec, rng: &mut ChaCha8Rng) -> Crop {
    let area = (height * width) as f64;
    let (lo, hi) = spec.crop_scale;
    let frac = rng.gen_range(lo..=hi);
    let min_side = ((lo * area).sqrt().ceil() as usize).min(height.min(width)).max(1);
    let max_side = ((hi * area).sqrt().floor() as usize).min(height.min(width)).max(min_side);
    let side = ((frac * area).sqrt().round() as usize).clamp(min_side, max_side);
    let y0 = rng.gen_range(0..=height - side);
    let x0 = rng.gen_range(0..=width - side);
    let flipped = rng.gen::<f64>() < spec.hflip_p;
    Crop {
        y0,
        x0,
        side,
        flipped,
        area_fraction: (side * side) as f64 / area,
    }
}

/// Bilinear resampling of a square crop to `out × out` (half-pixel centres,
/// edge clamping), optionally mirrored left-right.
pub fn resize_crop(scene: &Raster, crop: &Crop, out: usize) -> Raster {
    let scale = crop.side as f64 / out as f64;
    let coords: Vec<(usize, usize, f32)> = (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(crop.side - 1);
            let i1 = (i0 + 1).min(crop.side - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect();
    let mut r = Raster::zeros(scene.channels, out, out);
    for c in 0..scene.channels {
        let src = scene.plane(c);
        let dst = r.plane_mut(c);
        for (oy, &(y0, y1, wy)) in coords.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in coords.iter().enumerate() {
                let at = |y: usize, x: usize| src[(crop.y0 + y) * scene.width + crop.x0 + x];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                let tx = if crop.flipped { out - 1 - ox } else { ox };
                dst[oy * out + tx] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    r
}

/// One augmented view: random crop, resize, optional flip. Pixel values are
/// only resampled, never recoloured.
pub fn augment_view(scene: &Raster, spec: &SimSiamSpec, rng: &mut ChaCha8Rng) -> (Raster, Crop) {
    let crop = sample_crop(scene.height, scene.width, spec, rng);
    (resize_crop(scene, &crop, spec.view_size), crop)
}

/// `−½·[cos(p1, sg(z2)) + cos(p2, sg(z1))]`, averaged over the batch.
pub fn simsiam_loss(p1: &Tensor, z1: &Tensor, p2: &Tensor, z2: &Tensor) -> Result<Tensor> {
    let a = nn::cosine_rows(p1, &z2.detach())?.mean_all()?;
    let b = nn::cosine_rows(p2, &z1.detach())?.mean_all()?;
    Ok(((a + b)? * -0.5)?)
}

/// Projector and predictor MLPs.
#[derive(Debug, Clone)]
pub struct SimSiamHeads {
    pub store: ParamStore,
}

impl SimSiamHeads {
    pub fn new(feature_dim: usize, proj_dim: usize, pred_hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        let init = Init { seed };
        let mut s = ParamStore::new(dtype);
        add_linear(&mut s, &init, "projector.0", feature_dim, proj_dim, false)?;
        add_batch_norm(&mut s, "projector.1", proj_dim, true)?;
        add_linear(&mut s, &init, "projector.3", proj_dim, proj_dim, false)?;
        add_batch_norm(&mut s, "projector.4", proj_dim, true)?;
        add_linear(&mut s, &init, "projector.6", proj_dim, proj_dim, false)?;
        add_batch_norm(&mut s, "projector.7", proj_dim, false)?;
        add_linear(&mut s, &init, "predictor.0", proj_dim, pred_hidden, false)?;
        add_batch_norm(&mut s, "predictor.1", pred_hidden, true)?;
        add_linear(&mut s, &init, "predictor.3", pred_hidden, proj_dim, true)?;
        Ok(SimSiamHeads { store: s })
    }

    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        let s = &self.store;
        let y = batch_norm(&linear(f, s, "projector.0")?, s, "projector.1", true)?.relu()?;
        let y = batch_norm(&linear(&y, s, "projector.3")?, s, "projector.4", true)?.relu()?;
        batch_norm(&linear(&y, s, "projector.6")?, s, "projector.7", true)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        let s = &self.store;
        let y = batch_norm(&linear(z, s, "predictor.0")?, s, "predictor.1", true)?.relu()?;
        linear(&y, s, "predictor.3")
    }
}

/// Outputs of the siamese forward pass on a batch of view pairs.
pub struct SiameseOutputs {
    pub p1: Tensor,
    pub z1: Tensor,
    pub p2: Tensor,
    pub z2: Tensor,
}

pub fn siamese_forward(backbone: &Backbone, heads: &SimSiamHeads, v1: &Tensor, v2: &Tensor) -> Result<SiameseOutputs> {
    let z1 = heads.project(&backbone.forward(v1, BnMode::Train)?)?;
    let z2 = heads.project(&backbone.forward(v2, BnMode::Train)?)?;
    Ok(SiameseOutputs {
        p1: heads.predict(&z1)?,
        p2: heads.predict(&z2)?,
        z1,
        z2,
    })
}

/// SGD with momentum and coupled weight decay:
/// `g ← ∇ + λθ; b ← μb + g; θ ← θ − ηb`.
pub struct SgdMomentum {
    vars: Vec<(Var, Option<Tensor>)>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            vars: vars.into_iter().map(|v| (v, None)).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (var, buf) in self.vars.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g + (var.as_tensor() * self.weight_decay)?)?;
            let b = match buf.take() {
                None => g,
                Some(prev) => ((prev * self.momentum)? + g)?,
            };
            var.set(&(var.as_tensor() - (&b * lr)?)?)?;
            *buf = Some(b.detach());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSiamHistory {
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    /// Mean per-dimension std of L2-normalised projections, per epoch.
    pub z_std: Vec<f64>,
}

/// Mean over dimensions of the batch std of row-normalised `z`.
pub fn normalized_std(z: &Tensor) -> Result<f64> {
    let n = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let zn = z.broadcast_div(&n)?;
    let var = zn.var_keepdim(0)?;
    Ok(nn::to_f64_vec(&var.sqrt()?.mean_all()?)?[0])
}

/// Pre-trains `backbone` (made fully trainable) on normalised scenes. One
/// view pair per scene per epoch; views of scene `i` in epoch `e` come from
/// their own RNG stream, so results do not depend on batching order.
/// Projector and predictor are discarded on return.
pub fn train_simsiam(
    backbone: &mut Backbone,
    scenes: &[&Raster],
    spec: &SimSiamSpec,
    seed: u64,
) -> Result<SimSiamHistory> {
    if scenes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "SimSiam needs at least 2 scenes, got {}",
            scenes.len()
        )));
    }
    if let Some(s) = scenes.iter().find(|s| s.channels != backbone.in_channels) {
        return Err(Error::InvalidInput(format!(
            "{}-channel scene for a {}-channel backbone",
            s.channels, backbone.in_channels
        )));
    }
    let policy = backbone.policy;
    backbone.set_freeze_policy(FreezePolicy::AllTrainable);
    let dtype = backbone.store.dtype();
    let proj = spec.proj_dim.unwrap_or(backbone.feature_dim());
    let heads = SimSiamHeads::new(backbone.feature_dim(), proj, spec.pred_hidden, derive_seed(seed, "heads"), dtype)?;
    let vars: Vec<Var> = backbone
        .store
        .trainable()
        .into_iter()
        .chain(heads.store.trainable())
        .map(|(_, v)| v)
        .collect();
    let mut opt = SgdMomentum::new(vars, spec.momentum, spec.weight_decay);
    let mut shuffle = rng(derive_seed(seed, "simsiam-shuffle"));
    let batch = spec.batch_size.min(scenes.len());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = SimSiamHistory::default();
    for epoch in 0..spec.epochs {
        let lr = spec.learning_rate(epoch);
        order.shuffle(&mut shuffle);
        let (mut total, mut stds, mut n) = (0.0, 0.0, 0);
        for chunk in order.chunks_exact(batch) {
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut r = rng(derive_seed(seed, &format!("view/{epoch}/{i}")));
                v1.push(augment_view(scenes[i], spec, &mut r).0);
                v2.push(augment_view(scenes[i], spec, &mut r).0);
            }
            let t1 = rasters_to_tensor(&v1.iter().collect::<Vec<_>>(), dtype)?;
            let t2 = rasters_to_tensor(&v2.iter().collect::<Vec<_>>(), dtype)?;
            let out = siamese_forward(backbone, &heads, &t1, &t2)?;
            let loss = simsiam_loss(&out.p1, &out.z1, &out.p2, &out.z2)?;
            let grads = loss.backward()?;
            opt.step(&grads, lr)?;
            total += nn::to_f64_vec(&loss)?[0];
            stds += normalized_std(&out.z1.detach())?;
            n += 1;
        }
        history.loss.push(total / n as f64);
        history.lr.push(lr);
        history.z_std.push(stds / n as f64);
        log::debug!("simsiam epoch {epoch}: loss {:.4} z_std {:.4}", total / n as f64, stds / n as f64);
    }
    backbone.set_freeze_policy(policy);
    Ok(history)
}

/// Metadata stored with a pre-trained backbone archive.
pub fn pretrain_metadata(spec: &SimSiamSpec, seed: u64, history: &SimSiamHistory) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([
        ("simsiam_spec".to_string(), serde_json::to_string(spec)?),
        ("seed".to_string(), seed.to_string()),
        ("history".to_string(), serde_json::to_string(history)?),
    ]))
}
