//! Named-parameter storage, weight archives and the layer primitives shared
//! by the backbone, head and contrastive modules.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ARCHIVE_FORMAT: &str = "airsat-weights-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Optimised parameter.
    Weight,
    /// Running statistic, updated in place during training.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Ordered map of named tensors. Frozen parameters are handed out detached,
/// so no gradient graph is built through them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
}

/// Deep copy of parameter values, used to restore best-epoch weights.
pub type Snapshot = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        self.params.insert(
            name.to_string(),
            Param {
                var: Var::from_tensor(&value)?,
                kind,
                trainable: kind == ParamKind::Weight,
            },
        );
        Ok(())
    }

    pub fn insert_vec(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
        kind: ParamKind,
    ) -> Result<()> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.insert(name, t, kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::Tensor {
            name: name.into(),
            message: "missing parameter".into(),
        })
    }

    /// Value of `name`; detached unless trainable.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let p = self.param(name)?;
        Ok(if p.trainable && p.kind == ParamKind::Weight {
            p.var.as_tensor().clone()
        } else {
            p.var.as_tensor().detach()
        })
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self.param(name)?;
        if p.var.shape() != value.shape() {
            return Err(Error::Tensor {
                name: name.into(),
                message: format!("shape {:?} != {:?}", value.dims(), p.var.dims()),
            });
        }
        p.var.set(&value.to_dtype(self.dtype)?.detach())?;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Marks weights trainable iff `pred(name)`; buffers are never trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = p.kind == ParamKind::Weight && pred(name);
        }
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn num_elements(&self, pred: impl Fn(&str, &Param) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| pred(k, p))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        for (k, v) in snap {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Merges another store's parameters under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (k, p) in other.params {
            self.params.insert(format!("{prefix}{k}"), p);
        }
    }

    /// Sha256 over tensor names and values (header metadata excluded).
    pub fn digest(&self) -> Result<String> {
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().detach()))
            .collect();
        payload_digest(&tensors)
    }

    /// Serializes to safetensors bytes with the archive header metadata.
    pub fn to_bytes(&self, kind: &str, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().detach()))
            .collect();
        let payload = payload_digest(&tensors)?;
        let mut meta: HashMap<String, String> =
            extra.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        meta.insert("format".into(), ARCHIVE_FORMAT.into());
        meta.insert("kind".into(), kind.into());
        meta.insert("payload_sha256".into(), payload);
        let buffers: Vec<&str> = self
            .params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Buffer)
            .map(|(k, _)| k.as_str())
            .collect();
        meta.insert("buffers".into(), serde_json::to_string(&buffers)?);
        let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Weights {
            path: Default::default(),
            message: e.to_string(),
        })?;
        canonical_header(bytes)
    }

    /// Writes the archive atomically (temporary file then rename).
    pub fn save(&self, path: &Path, kind: &str, extra: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_bytes(kind, extra)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Rewrites the JSON header with sorted keys so identical stores give
/// identical bytes (safetensors emits its metadata in hash-map order).
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let sorted = serde_json::to_vec(&header)?;
    if sorted.len() > n {
        return Err(Error::Weights {
            path: Default::default(),
            message: "canonical header longer than the original".into(),
        });
    }
    bytes[8..8 + sorted.len()].copy_from_slice(&sorted);
    bytes[8 + sorted.len()..8 + n].fill(b' ');
    Ok(bytes)
}

fn payload_digest(tensors: &[(String, Tensor)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Tensors and header metadata read from a weight archive.
#[derive(Debug)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn buffers(&self) -> Vec<String> {
        self.metadata
            .get("buffers")
            .and_then(|s| serde_json::from_str(s).ok())
            .unwrap_or_default()
    }

    /// Loads `path`, verifying the optional whole-file checksum pin and the
    /// embedded payload digest when present.
    pub fn read(path: &Path, expected_sha256: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Some(want) = expected_sha256 {
            let got = hex::encode(Sha256::digest(&bytes));
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::weights(path, format!("sha256 {got} does not match pin {want}")));
            }
        }
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::weights(path, e.to_string()))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::weights(path, e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = view
                .load(&Device::Cpu)
                .map_err(|e| Error::weights(path, format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        if let Some(want) = metadata.get("payload_sha256") {
            let list: Vec<(String, Tensor)> =
                tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            if &payload_digest(&list)? != want {
                return Err(Error::weights(path, "payload digest mismatch"));
            }
        }
        Ok(Archive { tensors, metadata })
    }
}

/// Renames applied to external archives before loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NameMap {
    /// Prefix removed from every tensor name that carries it.
    pub strip_prefix: Option<String>,
    /// Exact renames, applied after prefix stripping.
    pub rename: BTreeMap<String, String>,
    /// Archive tensors to drop (e.g. classifier weights).
    pub ignore_prefixes: Vec<String>,
    /// Archive tensors to drop by suffix (e.g. batch counters).
    pub ignore_suffixes: Vec<String>,
}

impl NameMap {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn apply(&self, name: &str) -> Option<String> {
        let mut n = name;
        if let Some(p) = &self.strip_prefix {
            n = n.strip_prefix(p.as_str()).unwrap_or(n);
        }
        if self.ignore_prefixes.iter().any(|p| n.starts_with(p.as_str()))
            || self.ignore_suffixes.iter().any(|p| n.ends_with(p.as_str()))
        {
            return None;
        }
        Some(self.rename.get(n).cloned().unwrap_or_else(|| n.to_string()))
    }
}

impl ParamStore {
    /// Replaces every parameter with the archive's value. All names and
    /// shapes are checked before anything is written, so a failed load leaves
    /// the store untouched. Archive tensors without a matching parameter are
    /// an error unless `allow_extra`.
    pub fn load_archive(
        &self,
        archive: &Archive,
        map: &NameMap,
        path: &Path,
        allow_extra: bool,
    ) -> Result<()> {
        let mut staged: BTreeMap<String, Tensor> = BTreeMap::new();
        for (raw, t) in &archive.tensors {
            let Some(name) = map.apply(raw) else { continue };
            match self.params.get(&name) {
                Some(p) => {
                    if p.var.dims() != t.dims() {
                        return Err(Error::weights(
                            path,
                            format!(
                                "tensor {name}: shape {:?} does not match model {:?}",
                                t.dims(),
                                p.var.dims()
                            ),
                        ));
                    }
                    staged.insert(name, t.to_dtype(self.dtype)?);
                }
                None if allow_extra => {}
                None => {
                    return Err(Error::weights(path, format!("tensor {name}: not part of the model")))
                }
            }
        }
        if let Some(missing) = self.params.keys().find(|k| !staged.contains_key(*k)) {
            return Err(Error::weights(path, format!("tensor {missing}: missing from archive")));
        }
        for (k, v) in &staged {
            self.params[k].var.set(v)?;
        }
        Ok(())
    }
}

/// Deterministic parameter initialisers; every tensor draws from its own
/// stream derived from `(seed, name)`.
pub struct Init {
    pub seed: u64,
}

impl Init {
    fn rng(&self, name: &str) -> rand_chacha::ChaCha8Rng {
        rng(derive_seed(self.seed, name))
    }

    /// He-normal with fan-out scaling, the ResNet convolution scheme.
    pub fn kaiming_normal_fan_out(&self, name: &str, shape: &[usize]) -> Vec<f64> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut r = self.rng(name);
        (0..shape.iter().product::<usize>()).map(|_| dist.sample(&mut r)).collect()
    }

    /// U(−bound, bound).
    pub fn uniform(&self, name: &str, n: usize, bound: f64) -> Vec<f64> {
        let mut r = self.rng(name);
        (0..n).map(|_| r.gen_range(-bound..=bound)).collect()
    }
}

pub fn add_conv(store: &mut ParamStore, init: &Init, name: &str, shape: [usize; 4]) -> Result<()> {
    let w = init.kaiming_normal_fan_out(name, &shape);
    store.insert_vec(name, &shape, w, ParamKind::Weight)
}

pub fn add_batch_norm(store: &mut ParamStore, prefix: &str, c: usize, affine: bool) -> Result<()> {
    if affine {
        store.insert_vec(&format!("{prefix}.weight"), &[c], vec![1.0; c], ParamKind::Weight)?;
        store.insert_vec(&format!("{prefix}.bias"), &[c], vec![0.0; c], ParamKind::Weight)?;
    }
    store.insert_vec(&format!("{prefix}.running_mean"), &[c], vec![0.0; c], ParamKind::Buffer)?;
    store.insert_vec(&format!("{prefix}.running_var"), &[c], vec![1.0; c], ParamKind::Buffer)
}

/// Linear layer with the default U(±1/√fan_in) weight and bias init.
pub fn add_linear(
    store: &mut ParamStore,
    init: &Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let wn = format!("{prefix}.weight");
    store.insert_vec(&wn, &[fan_out, fan_in], init.uniform(&wn, fan_in * fan_out, bound), ParamKind::Weight)?;
    if bias {
        let bn = format!("{prefix}.bias");
        store.insert_vec(&bn, &[fan_out], init.uniform(&bn, fan_out, bound), ParamKind::Weight)?;
    }
    Ok(())
}

pub fn linear(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let y = x.matmul(&w.t()?)?;
    let bn = format!("{prefix}.bias");
    Ok(if store.contains(&bn) {
        y.broadcast_add(&store.get(&bn)?)?
    } else {
        y
    })
}

pub fn conv2d(x: &Tensor, store: &ParamStore, name: &str, stride: usize, padding: usize) -> Result<Tensor> {
    let w = store.get(name)?;
    Ok(x.conv2d(&w, padding, stride, 1, 1)?)
}

/// Batch normalisation over dim 1 of an (N, C) or (N, C, H, W) tensor.
///
/// In training mode the batch statistics (biased variance) normalise the
/// input and the running statistics are updated with the unbiased variance;
/// otherwise the running statistics are used.
pub fn batch_norm(x: &Tensor, store: &ParamStore, prefix: &str, train: bool) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let c = dims[1];
    let bshape: Vec<usize> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| if i == 1 { d } else { 1 })
        .collect();
    let (mean, var) = if train {
        let xt = x.transpose(0, 1)?.flatten_from(1)?;
        let n = xt.dim(1)?;
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "{prefix}: batch statistics need more than one value per channel"
            )));
        }
        let mean = xt.mean_keepdim(1)?;
        let var = xt.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
        let rm = format!("{prefix}.running_mean");
        let rv = format!("{prefix}.running_var");
        let unbiased = (var.detach() * (n as f64 / (n - 1) as f64))?.flatten_all()?;
        let new_mean = ((store.get(&rm)? * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
        let new_var = ((store.get(&rv)? * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
        store.set(&rm, &new_mean)?;
        store.set(&rv, &new_var)?;
        (mean.reshape(bshape.as_slice())?, var.reshape(bshape.as_slice())?)
    } else {
        (
            store.get(&format!("{prefix}.running_mean"))?.reshape(bshape.as_slice())?,
            store.get(&format!("{prefix}.running_var"))?.reshape(bshape.as_slice())?,
        )
    };
    let y = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
    let wn = format!("{prefix}.weight");
    if store.contains(&wn) {
        let w = store.get(&wn)?.reshape(bshape.as_slice())?;
        let b = store.get(&format!("{prefix}.bias"))?.reshape(bshape.as_slice())?;
        debug_assert_eq!(w.dim(1)?, c);
        Ok(y.broadcast_mul(&w)?.broadcast_add(&b)?)
    } else {
        Ok(y)
    }
}

/// Inverted dropout with a mask drawn from `rng`: kept units are scaled by
/// 1/(1−p).
pub fn dropout(x: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Row-wise cosine similarity of two (N, D) tensors. Errors on zero rows.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = a.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = na.min_keepdim(0)?.min_keepdim(1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0]
        .min(nb.min_keepdim(0)?.min_keepdim(1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0]);
    if !(min > 0.0) {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm vector".into()));
    }
    let dot = (a * b)?.sum_keepdim(D::Minus1)?;
    Ok(dot.div(&(na * nb)?)?.squeeze(D::Minus1)?)
}

/// 3×3, stride 2, padding 1 max pooling with a backward pass. Padding never
/// wins the max; gradients go to the first maximal element of each window in
/// row-major order.
struct MaxPool3s2;

fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

fn pool_argmax<T: Copy + PartialOrd>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (pool_out(h), pool_out(w));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = (2 * ox + kx) as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let i = base + y as usize * w + xx as usize;
                        let v = x[i];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, i));
                        }
                    }
                }
                let (v, i) = best.expect("window overlaps the input");
                out.push(v);
                idx.push(i);
            }
        }
    }
    (out, idx)
}

impl CustomOp1 for MaxPool3s2 {
    fn name(&self) -> &'static str {
        "max_pool_3x3_s2_p1"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("max pool needs a contiguous input".into()))?;
        let shape = Shape::from((n, c, pool_out(h), pool_out(w)));
        let s = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(pool_argmax(&v[start..end], n, c, h, w).0),
            CpuStorage::F64(v) => CpuStorage::F64(pool_argmax(&v[start..end], n, c, h, w).0),
            _ => return Err(candle_core::Error::Msg("max pool supports f32 and f64".into())),
        };
        Ok((s, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let x = arg.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let g = grad_res.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let (_, idx) = pool_argmax(&x, n, c, h, w);
        let mut grad = vec![0.0f64; x.len()];
        for (gi, &i) in g.iter().zip(&idx) {
            grad[i] += gi;
        }
        let t = Tensor::from_vec(grad, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool3s2)?)
}

/// Mean over the spatial dims of an (N, C, H, W) tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Flattened f64 copy of a tensor.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
