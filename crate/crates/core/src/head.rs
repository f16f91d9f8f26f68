//! Three-layer MLP regression head and the supervised training loop.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BnMode};
use crate::error::{Error, Result};
use crate::nn::{self, add_linear, dropout, linear, Init, ParamStore, Snapshot};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl HeadSpec {
    pub fn new(input_dim: usize) -> Self {
        HeadSpec {
            input_dim,
            hidden_dim: 512,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub spec: HeadSpec,
    pub store: ParamStore,
}

pub fn build_head(spec: HeadSpec, seed: u64, dtype: DType) -> Result<Head> {
    if spec.input_dim == 0 || spec.hidden_dim == 0 {
        return Err(Error::Config(format!("head dimensions must be positive: {spec:?}")));
    }
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1)", spec.dropout)));
    }
    let init = Init { seed };
    let mut store = ParamStore::new(dtype);
    add_linear(&mut store, &init, "fc1", spec.input_dim, spec.hidden_dim, true)?;
    add_linear(&mut store, &init, "fc2", spec.hidden_dim, spec.hidden_dim, true)?;
    add_linear(&mut store, &init, "out", spec.hidden_dim, 1, true)?;
    Ok(Head { spec, store })
}

impl Head {
    /// (N, input_dim) → (N,). Dropout is active iff `dropout_rng` is given.
    pub fn forward(&self, x: &Tensor, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if x.dims().len() != 2 || x.dim(1)? != self.spec.input_dim {
            return Err(Error::InvalidInput(format!(
                "head expects (N, {}), got {:?}",
                self.spec.input_dim,
                x.dims()
            )));
        }
        let mut y = linear(x, &self.store, "fc1")?.relu()?;
        if let Some(r) = dropout_rng.as_deref_mut() {
            y = dropout(&y, self.spec.dropout, r)?;
        }
        y = linear(&y, &self.store, "fc2")?.relu()?;
        if let Some(r) = dropout_rng.as_deref_mut() {
            y = dropout(&y, self.spec.dropout, r)?;
        }
        Ok(linear(&y, &self.store, "out")?.squeeze(1)?)
    }

    /// Evaluation-mode prediction for one feature vector.
    pub fn predict(&self, features: &[f32]) -> Result<f64> {
        if features.len() != self.spec.input_dim {
            return Err(Error::InvalidInput(format!(
                "feature length {} != head input {}",
                features.len(),
                self.spec.input_dim
            )));
        }
        let x = Tensor::from_slice(features, (1, features.len()), &Device::Cpu)?.to_dtype(self.store.dtype())?;
        Ok(nn::to_f64_vec(&self.forward(&x, None)?)?[0])
    }
}

/// Concatenates `[image ‖ met-or-embedding]`.
pub fn fuse_features(image: Option<&[f32]>, met: Option<&[f32]>, met_embedding: Option<&[f32]>) -> Result<Vec<f32>> {
    if met.is_some() && met_embedding.is_some() {
        return Err(Error::InvalidInput("met and met embedding are mutually exclusive".into()));
    }
    if image.is_none() && met.is_none() && met_embedding.is_none() {
        return Err(Error::InvalidInput("no feature parts to fuse".into()));
    }
    let mut v = Vec::new();
    for part in [image, met, met_embedding].into_iter().flatten() {
        v.extend_from_slice(part);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// `None` trains for exactly `max_epochs`.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-4,
            max_epochs: 150,
            early_stop_patience: Some(25),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

/// A model trainable by [`train_supervised`] over indexed samples.
pub trait Regressor {
    /// Predictions for the samples `idx`; training mode enables dropout and
    /// batch statistics where the model has them.
    fn predict_batch(&self, idx: &[usize], train: Option<&mut ChaCha8Rng>) -> Result<Tensor>;
    fn stores(&self) -> Vec<&ParamStore>;
}

/// Head over a fixed feature matrix.
pub struct HeadModel<'a> {
    pub head: &'a Head,
    pub features: &'a Tensor,
}

impl Regressor for HeadModel<'_> {
    fn predict_batch(&self, idx: &[usize], train: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let x = self.features.index_select(&ids, 0)?;
        self.head.forward(&x, train)
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.head.store]
    }
}

/// Block4 + pooling of a backbone over cached trunk activations, fused with
/// side features (met or its embedding), then the head.
pub struct FineTuneModel<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a Head,
    pub trunk: &'a [Tensor],
    /// (N, d) side features or `None`.
    pub side: Option<&'a Tensor>,
}

impl Regressor for FineTuneModel<'_> {
    fn predict_batch(&self, idx: &[usize], train: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let acts: Vec<&Tensor> = idx.iter().map(|&i| &self.trunk[i]).collect();
        let x = Tensor::stack(&acts, 0)?;
        let mode = if train.is_some() { BnMode::Block4 } else { BnMode::Eval };
        let mut f = self.backbone.head_block(&x, mode)?;
        if let Some(side) = self.side {
            let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
            f = Tensor::cat(&[&f, &side.index_select(&ids, 0)?], 1)?;
        }
        self.head.forward(&f, train)
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.backbone.store, &self.head.store]
    }
}

fn mse(pred: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(y)?.sqr()?.mean_all()?)
}

/// Eval-mode predictions for `idx`, in chunks.
pub fn predict_all(model: &dyn Regressor, idx: &[usize], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for c in idx.chunks(chunk.max(1)) {
        out.extend(nn::to_f64_vec(&model.predict_batch(c, None)?)?);
    }
    Ok(out)
}

fn eval_loss(model: &dyn Regressor, idx: &[usize], y: &[f64]) -> Result<f64> {
    let p = predict_all(model, idx, 256)?;
    Ok(p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

fn snapshot(model: &dyn Regressor) -> Result<Vec<Snapshot>> {
    model.stores().iter().map(|s| s.snapshot()).collect()
}

/// Minimises MSE with Adam over shuffled mini-batches (the short final
/// batch dropped). Early stopping, when configured, halts once the
/// validation loss has not strictly improved for `patience` epochs; the
/// weights of the best validation epoch are restored on return.
pub fn train_supervised(
    model: &dyn Regressor,
    train: (&[usize], &[f64]),
    val: (&[usize], &[f64]),
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let (train_idx, train_y) = train;
    let (val_idx, val_y) = val;
    if train_idx.len() != train_y.len() || val_idx.len() != val_y.len() {
        return Err(Error::InvalidInput("sample and target counts differ".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    if train_idx.len() < config.batch_size || config.batch_size == 0 {
        return Err(Error::InvalidInput(format!(
            "{} training samples cannot fill one batch of {}",
            train_idx.len(),
            config.batch_size
        )));
    }
    let vars: Vec<Var> = model
        .stores()
        .iter()
        .flat_map(|s| s.trainable().into_iter().map(|(_, v)| v))
        .collect();
    let dtype = model.stores()[0].dtype();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut shuffle = rng(crate::seed::derive_seed(config.seed, "shuffle"));
    let mut drop = rng(crate::seed::derive_seed(config.seed, "dropout"));
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut best = snapshot(model)?;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks_exact(config.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let y: Vec<f64> = chunk.iter().map(|&k| train_y[k]).collect();
            let y = Tensor::from_vec(y, idx.len(), &Device::Cpu)?.to_dtype(dtype)?;
            let pred = model.predict_batch(&idx, Some(&mut drop))?;
            let loss = mse(&pred, &y)?;
            opt.backward_step(&loss)?;
            total += nn::to_f64_vec(&loss)?[0];
            batches += 1;
        }
        let val = eval_loss(model, val_idx, val_y)?;
        if !val.is_finite() {
            return Err(Error::Degenerate(format!("validation loss diverged at epoch {epoch}")));
        }
        history.train_loss.push(total / batches as f64);
        history.val_loss.push(val);
        history.stopped_epoch = epoch;
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch;
            best = snapshot(model)?;
        }
        if let Some(p) = config.early_stop_patience {
            if epoch - history.best_epoch >= p {
                break;
            }
        }
    }
    for (store, snap) in model.stores().iter().zip(&best) {
        store.restore(snap)?;
    }
    Ok(history)
}
