//! Toy-scale training: Adam optimization, gradient clipping, a
//! procedural synthetic dataset, and binary checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayer::{extract_green, PackedRaw};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::model::{build, forward, ErienetParams, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{Grads, Scalar, Shape, Tape, Tensor, Var};

pub const TOY_BATCH: usize = 4;
pub const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers per parameter, allocated lazily on the
/// first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState { hyper, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            hyper: self.hyper,
            step: self.step,
            m: self.m.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            v: self.v.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamHyper::default())
    }
}

/// One bias-corrected Adam update over every trainable tensor. Every
/// parameter must have a gradient; a missing one is an error naming it.
pub fn adam_step<T: Scalar>(
    params: &mut ErienetParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for name in params.tensors.keys() {
        if !grads.contains_key(name) {
            return Err(Error::MissingGrad(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
    let (one_m_b1, one_m_b2) = (T::one() - b1, T::one() - b2);
    let bias1 = T::from_f64(1.0 - h.beta1.powi(t));
    let bias2 = T::from_f64(1.0 - h.beta2.powi(t));
    let lr = T::from_f64(h.lr);
    let eps = T::from_f64(h.eps);
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape));
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + one_m_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_m_b2 * gi * gi;
            let mhat = m.data[i] / bias1;
            let vhat = v.data[i] / bias2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Maps leaf gradients back to parameter names; a parameter without a
/// gradient is an error naming it.
pub fn collect_grads<T: Scalar>(
    grads: &Grads<T>,
    param_vars: &BTreeMap<String, Var>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut out = BTreeMap::new();
    for (name, &var) in param_vars {
        let g = grads
            .get(var)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        out.insert(name.clone(), g.clone());
    }
    Ok(out)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut BTreeMap<String, Tensor<T>>,
    max_norm: f64,
) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|&v| v.to_f64() * v.to_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for t in grads.values_mut() {
            for v in t.data.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// A training pair: dark packed input and its bright (1,3,H,W) target.
pub type ToySample = (PackedRaw, Tensor<f32>);

/// Procedural bright targets (smooth gradients plus soft blobs),
/// mosaicked, divided by `ratio`, and perturbed with Gaussian noise
/// (sigma 0.01) to form the dark inputs.
pub fn synthetic_dataset(
    n: usize,
    mosaic_h: usize,
    mosaic_w: usize,
    ratio: f64,
    seed: u64,
) -> Vec<ToySample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let target = synthetic_target(mosaic_h, mosaic_w, &mut rng);
            let dark = darken_and_mosaic(&target, ratio, &mut rng);
            (dark, target)
        })
        .collect()
}

fn synthetic_target(h: usize, w: usize, rng: &mut Rng) -> Tensor<f32> {
    let mut t = Tensor::<f32>::zeros([1, 3, h, w]);
    for c in 0..3 {
        let gx = rng.uniform(-0.4, 0.4);
        let gy = rng.uniform(-0.4, 0.4);
        let base = rng.uniform(0.35, 0.65);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.uniform(0.0, h as f64),
                    rng.uniform(0.0, w as f64),
                    rng.uniform(-0.3, 0.3),
                    rng.uniform(h as f64 / 8.0, h as f64 / 3.0),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = base + gx * (x as f64 / w as f64) + gy * (y as f64 / h as f64);
                for &(cy, cx, amp, r) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                let i = t.idx(0, c, y, x);
                t.data[i] = v.clamp(0.05, 0.95) as f32;
            }
        }
    }
    t
}

fn darken_and_mosaic(target: &Tensor<f32>, ratio: f64, rng: &mut Rng) -> PackedRaw {
    let [_, _, h, w] = target.shape;
    let mut p = PackedRaw::zeros(w / 2, h / 2);
    let inv = 1.0 / ratio;
    let mut sample = |c: usize, y: usize, x: usize| -> f32 {
        let v = target.at(0, c, y, x) as f64 * inv + 0.01 * rng.normal();
        v.clamp(0.0, 1.0) as f32
    };
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let r = sample(0, 2 * y, 2 * x);
            let g1 = sample(1, 2 * y, 2 * x + 1);
            let g2 = sample(1, 2 * y + 1, 2 * x);
            let b = sample(2, 2 * y + 1, 2 * x + 1);
            p.set(0, y, x, r);
            p.set(1, y, x, g1);
            p.set(2, y, x, g2);
            p.set(3, y, x, b);
        }
    }
    p
}

/// Training driver owning all mutable state, so a checkpoint captures
/// everything needed for bit-exact resume.
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ErienetParams<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub rng: Rng,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build(&config, seed)?;
        Ok(Trainer {
            config,
            params,
            adam: AdamState::default(),
            step: 0,
            rng: Rng::new(seed ^ 0x7261_696e), // separate stream from init
            weights: LossWeights::default(),
        })
    }

    /// Runs `steps` optimization steps and returns the loss trace.
    pub fn train(&mut self, data: &[ToySample], steps: usize) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let (pw, ph) = (data[0].0.width, data[0].0.height);
        for (d, t) in data {
            if (d.width, d.height) != (pw, ph) || t.shape != [1, 3, 2 * ph, 2 * pw] {
                return Err(Error::shape("train", "all samples must share dimensions"));
            }
        }
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<usize> =
                (0..TOY_BATCH).map(|_| self.rng.below(data.len())).collect();
            let (packed, green, target) = stack_batch(data, &batch);

            let mut tape = Tape::<f32>::new();
            let fwd = forward(&mut tape, &mut self.params, &self.config, &packed, &green, true)?;
            let gt = tape.constant(target);
            let loss = total_loss(&mut tape, fwd.out, gt, &self.weights)?;
            let loss_val = tape.value(loss).scalar_value() as f64;
            if !loss_val.is_finite() {
                return Err(Error::invalid("train", format!("non-finite loss {loss_val}")));
            }
            let grads = tape.backward(loss)?;
            let mut named = collect_grads(&grads, &fwd.param_vars)?;
            clip_global_norm(&mut named, GRAD_CLIP_NORM);
            adam_step(&mut self.params, &named, &mut self.adam)?;
            self.step += 1;
            trace.push(loss_val);
        }
        Ok(trace)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng_state: self.rng.state(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Self {
        Trainer {
            config: cp.config,
            params: cp.params,
            adam: cp.adam,
            step: cp.step,
            rng: Rng::from_state(cp.rng_state),
            weights: LossWeights::default(),
        }
    }
}

fn stack_batch(
    data: &[ToySample],
    idx: &[usize],
) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let b = idx.len();
    let (pw, ph) = (data[idx[0]].0.width, data[idx[0]].0.height);
    let [_, _, th, tw] = data[idx[0]].1.shape;
    let mut packed = Tensor::<f32>::zeros([b, 4, ph, pw]);
    let mut green = Tensor::<f32>::zeros([b, 2, ph, pw]);
    let mut target = Tensor::<f32>::zeros([b, 3, th, tw]);
    let plane = ph * pw;
    for (bi, &i) in idx.iter().enumerate() {
        let (d, t) = &data[i];
        packed.data[bi * 4 * plane..(bi + 1) * 4 * plane].copy_from_slice(&d.data);
        let g = extract_green::<f32>(d);
        green.data[bi * 2 * plane..(bi + 1) * 2 * plane].copy_from_slice(&g.data);
        target.data[bi * 3 * th * tw..(bi + 1) * 3 * th * tw].copy_from_slice(&t.data);
    }
    (packed, green, target)
}

/// Convenience wrapper: build, train, return (trace, trainer).
pub fn train_toy(
    config: &ModelConfig,
    data: &[ToySample],
    steps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Trainer)> {
    let mut t = Trainer::new(config.clone(), seed)?;
    let trace = t.train(data, steps)?;
    Ok((trace, t))
}

// ---------------------------------------------------------------------
// Checkpoint file format (version 1, little-endian):
//   magic "ERIE", u32 version, u32 JSON length + UTF-8 JSON metadata
//   (model config, step, rng state, Adam hyperparameters), u32 tensor
//   count, then per tensor: u16 name length + name, u8 ndim, ndim x u32
//   dims, raw f32 payload. Adam moments are stored as
//   "adam.m.<param>" / "adam.v.<param>", batch-norm running statistics
//   as "stats.mean.<site>" / "stats.var.<site>".
// ---------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"ERIE";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ErienetParams<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub rng_state: [u64; 4],
}

#[derive(Serialize, Deserialize)]
struct MetaBlob {
    model: ModelConfig,
    step: u64,
    rng: [u64; 4],
    adam: AdamHyper,
    adam_step: u64,
}

type RawEntry = (Vec<u32>, Vec<f32>);

fn flatten(cp: &Checkpoint, path: &str) -> Result<BTreeMap<String, RawEntry>> {
    let mut out: BTreeMap<String, RawEntry> = BTreeMap::new();
    let mut put = |name: String, dims: Vec<u32>, data: Vec<f32>| -> Result<()> {
        if out.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::NameCollision { path: path.into(), name });
        }
        Ok(())
    };
    let dims4 = |s: Shape| s.iter().map(|&d| d as u32).collect::<Vec<u32>>();
    for (k, t) in &cp.params.tensors {
        put(k.clone(), dims4(t.shape), t.data.clone())?;
    }
    for (k, s) in &cp.params.stats {
        put(format!("stats.mean.{k}"), vec![s.mean.len() as u32], s.mean.clone())?;
        put(format!("stats.var.{k}"), vec![s.var.len() as u32], s.var.clone())?;
    }
    for (k, t) in &cp.adam.m {
        put(format!("adam.m.{k}"), dims4(t.shape), t.data.clone())?;
    }
    for (k, t) in &cp.adam.v {
        put(format!("adam.v.{k}"), dims4(t.shape), t.data.clone())?;
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint) -> Result<()> {
    let pstr = path.as_ref().display().to_string();
    let meta = MetaBlob {
        model: cp.config.clone(),
        step: cp.step,
        rng: cp.rng_state,
        adam: cp.adam.hyper,
        adam_step: cp.adam.step,
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Json { path: pstr.clone(), source: e })?;
    let entries = flatten(cp, &pstr)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (dims, data)) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(&pstr, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!("while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let pstr = path.as_ref().display().to_string();
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&pstr, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: &pstr };

    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::BadMagic { path: pstr });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { path: pstr, found: version, expected: CKPT_VERSION });
    }
    let json_len = r.u32("metadata length")? as usize;
    let json = r.take(json_len, "metadata")?;
    let meta: MetaBlob = serde_json::from_slice(json)
        .map_err(|e| Error::Json { path: pstr.clone(), source: e })?;

    let count = r.u32("tensor count")? as usize;
    let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::MalformedHeader {
                path: pstr.clone(),
                detail: "tensor name is not UTF-8".into(),
            })?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let raw = r.take(4 * numel, &format!("payload of `{name}`"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if entries.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::NameCollision { path: pstr, name });
        }
    }

    let mut params = ErienetParams { tensors: BTreeMap::new(), stats: BTreeMap::new() };
    let mut adam = AdamState::<f32>::new(meta.adam);
    adam.step = meta.adam_step;
    let mut stat_halves: BTreeMap<String, (Option<Vec<f32>>, Option<Vec<f32>>)> = BTreeMap::new();
    for (name, (dims, data)) in entries {
        if let Some(site) = name.strip_prefix("stats.mean.") {
            stat_halves.entry(site.into()).or_default().0 = Some(data);
        } else if let Some(site) = name.strip_prefix("stats.var.") {
            stat_halves.entry(site.into()).or_default().1 = Some(data);
        } else {
            let shape = shape4(&dims, &pstr, &name)?;
            let t = Tensor::new(shape, data).map_err(|_| Error::Truncated {
                path: pstr.clone(),
                detail: format!("payload of `{name}` does not match dims"),
            })?;
            if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p.into(), t);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p.into(), t);
            } else {
                params.tensors.insert(name, t);
            }
        }
    }
    for (site, (mean, var)) in stat_halves {
        let (Some(mean), Some(var)) = (mean, var) else {
            return Err(Error::Truncated {
                path: pstr,
                detail: format!("incomplete running stats for `{site}`"),
            });
        };
        params.stats.insert(
            site.clone(),
            crate::tensor::BnStats { label: site, mean, var, initialized: true },
        );
    }

    Ok(Checkpoint {
        config: meta.model,
        params,
        adam,
        step: meta.step,
        rng_state: meta.rng,
    })
}

fn shape4(dims: &[u32], path: &str, name: &str) -> Result<Shape> {
    if dims.len() != 4 {
        return Err(Error::MalformedHeader {
            path: path.into(),
            detail: format!("tensor `{name}` has {} dims, expected 4", dims.len()),
        });
    }
    Ok([dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize])
}
