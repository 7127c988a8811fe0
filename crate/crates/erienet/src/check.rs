//! The 64-bit gradient-check suite: every differentiable op, the loss
//! terms, and the end-to-end tiny network. Shared by the CLI gate and
//! the acceptance tests.

use crate::bayer::{extract_green, PackedRaw};
use crate::error::Result;
use crate::loss::{
    l1_loss, ssim_op, total_loss, wavelet_mse_loss, wavelet_ssim_loss, LossWeights,
};
use crate::model::{build, forward, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{gradcheck, BnStats, Tape, Tensor, Var};
use crate::train::synthetic_dataset;

pub const OP_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

const H: f64 = 1e-5;

fn run<F>(name: &str, tol: f64, inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = gradcheck(f, inputs, H, 60, seed)?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        tol,
        coords: r.coords_checked,
    })
}

/// Uniform samples kept away from the kinks of relu/abs/clamp01.
fn smooth(shape: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.1, 0.9, rng)
}

fn signed(shape: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::uniform(shape, -1.0, 1.0, rng);
    // Nudge every element at least 0.05 from zero so relu/abs kinks and
    // tiny denominators cannot corrupt the central differences.
    for v in t.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

/// Gradient checks for every differentiable tape op.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let s: [usize; 4] = [2, 3, 4, 4];

    let x = signed(s, &mut rng);
    let y = signed(s, &mut rng);
    out.push(run("add", OP_TOL, &[x.clone(), y.clone()], seed, |t, v| {
        let r = t.add(v[0], v[1])?;
        Ok(t.sum_all(r))
    })?);
    out.push(run("sub", OP_TOL, &[x.clone(), y.clone()], seed, |t, v| {
        let r = t.sub(v[0], v[1])?;
        Ok(t.sum_all(r))
    })?);
    out.push(run("mul", OP_TOL, &[x.clone(), y.clone()], seed, |t, v| {
        let r = t.mul(v[0], v[1])?;
        Ok(t.sum_all(r))
    })?);
    out.push(run("div", OP_TOL, &[x.clone(), y.clone()], seed, |t, v| {
        let r = t.div(v[0], v[1])?;
        Ok(t.sum_all(r))
    })?);
    out.push(run("add_const/mul_const/neg", OP_TOL, &[x.clone()], seed, |t, v| {
        let a = t.add_const(v[0], 0.7);
        let b = t.mul_const(a, -1.3);
        let c = t.neg(b);
        Ok(t.sum_all(c))
    })?);
    out.push(run("abs", OP_TOL, &[x.clone()], seed, |t, v| {
        let r = t.abs(v[0]);
        Ok(t.sum_all(r))
    })?);
    out.push(run("relu", OP_TOL, &[x.clone()], seed, |t, v| {
        let r = t.relu(v[0]);
        Ok(t.sum_all(r))
    })?);
    out.push(run("sigmoid", OP_TOL, &[x.clone()], seed, |t, v| {
        let r = t.sigmoid(v[0]);
        Ok(t.sum_all(r))
    })?);
    out.push(run("clamp01", OP_TOL, &[smooth(s, &mut rng)], seed, |t, v| {
        let r = t.clamp01(v[0]);
        Ok(t.sum_all(r))
    })?);
    out.push(run("mean_all", OP_TOL, &[x.clone()], seed, |t, v| Ok(t.mean_all(v[0])))?);
    out.push(run(
        "concat/slice_channels",
        OP_TOL,
        &[x.clone(), y.clone()],
        seed,
        |t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let sl = t.slice_channels(c, 2, 3)?;
            Ok(t.sum_all(sl))
        },
    )?);
    out.push(run("global_avg_pool", OP_TOL, &[x.clone()], seed, |t, v| {
        let p = t.global_avg_pool(v[0]);
        // Square so per-channel means carry distinct weights.
        let q = t.mul(p, p)?;
        Ok(t.sum_all(q))
    })?);
    out.push(run("avg_pool", OP_TOL, &[signed([1, 2, 8, 8], &mut rng)], seed, |t, v| {
        let p = t.avg_pool(v[0], 4)?;
        let q = t.mul(p, p)?;
        Ok(t.sum_all(q))
    })?);
    out.push(run(
        "bilinear_upsample2x",
        OP_TOL,
        &[signed([1, 2, 4, 4], &mut rng)],
        seed,
        |t, v| {
            let u = t.bilinear_upsample2x(v[0]);
            let q = t.mul(u, u)?;
            Ok(t.sum_all(q))
        },
    )?);
    out.push(run(
        "pixel_shuffle",
        OP_TOL,
        &[signed([1, 8, 3, 3], &mut rng)],
        seed,
        |t, v| {
            let p = t.pixel_shuffle(v[0], 2)?;
            let q = t.mul(p, p)?;
            Ok(t.sum_all(q))
        },
    )?);
    out.push(run(
        "haar_dwt2d",
        OP_TOL,
        &[signed([1, 2, 6, 6], &mut rng)],
        seed,
        |t, v| {
            let d = t.haar_dwt2d(v[0])?;
            let q = t.mul(d, d)?;
            Ok(t.sum_all(q))
        },
    )?);

    let cx = signed([1, 2, 5, 5], &mut rng);
    let cw = Tensor::uniform([3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let cb = Tensor::uniform([1, 3, 1, 1], -0.1, 0.1, &mut rng);
    out.push(run("conv2d", OP_TOL, &[cx, cw, cb], seed, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let q = t.mul(y, y)?;
        Ok(t.sum_all(q))
    })?);
    out.push(run(
        "conv2d stride 2",
        OP_TOL,
        &[
            signed([1, 2, 6, 6], &mut rng),
            Tensor::uniform([3, 2, 3, 3], -0.5, 0.5, &mut rng),
        ],
        seed,
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 1)?;
            let q = t.mul(y, y)?;
            Ok(t.sum_all(q))
        },
    )?);
    out.push(run(
        "depthwise_separable_conv",
        OP_TOL,
        &[
            signed([1, 3, 5, 5], &mut rng),
            Tensor::uniform([3, 1, 3, 3], -0.5, 0.5, &mut rng),
            Tensor::uniform([1, 3, 1, 1], -0.1, 0.1, &mut rng),
            Tensor::uniform([4, 3, 1, 1], -0.5, 0.5, &mut rng),
            Tensor::uniform([1, 4, 1, 1], -0.1, 0.1, &mut rng),
        ],
        seed,
        |t, v| {
            let y = t.depthwise_separable_conv(v[0], v[1], Some(v[2]), v[3], Some(v[4]), 2, 1)?;
            let q = t.mul(y, y)?;
            Ok(t.sum_all(q))
        },
    )?);
    out.push(run(
        "conv1d_channels",
        OP_TOL,
        &[
            signed([2, 6, 1, 1], &mut rng),
            Tensor::uniform([1, 1, 1, 3], -0.5, 0.5, &mut rng),
        ],
        seed,
        |t, v| {
            let y = t.conv1d_channels(v[0], v[1])?;
            let q = t.mul(y, y)?;
            Ok(t.sum_all(q))
        },
    )?);
    // A quadratic readout of a normalized tensor is nearly constant (the
    // normalized second moment is fixed), leaving only a tiny residual
    // gradient that central differences cannot resolve. Project onto a
    // fixed random tensor instead so the gradient stays O(1).
    let proj = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let pr = proj.clone();
    out.push(run(
        "batch_norm (train)",
        OP_TOL,
        &[
            signed([2, 3, 4, 4], &mut rng),
            Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, &mut rng),
            Tensor::uniform([1, 3, 1, 1], -0.3, 0.3, &mut rng),
        ],
        seed,
        move |t, v| {
            let mut stats = BnStats::identity("check", 3);
            let y = t.batch_norm(v[0], Some(v[1]), Some(v[2]), &mut stats, true, 1e-5, 0.1)?;
            let p = t.constant(pr.clone());
            let q = t.mul(y, p)?;
            Ok(t.sum_all(q))
        },
    )?);
    let pr = proj.clone();
    out.push(run(
        "layer_norm",
        OP_TOL,
        &[
            signed([2, 3, 4, 4], &mut rng),
            Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, &mut rng),
            Tensor::uniform([1, 3, 1, 1], -0.3, 0.3, &mut rng),
        ],
        seed,
        move |t, v| {
            let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            let p = t.constant(pr.clone());
            let q = t.mul(y, p)?;
            Ok(t.sum_all(q))
        },
    )?);
    Ok(out)
}

/// Gradient checks for the metric and loss terms, differentiated with
/// respect to the predicted image only (the reference enters as a
/// constant, matching how training uses them).
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed ^ 0x6c6f_7373);
    let s: [usize; 4] = [1, 3, 16, 16];
    let out_img = smooth(s, &mut rng);
    let gt_img = smooth(s, &mut rng);
    let mut results = Vec::new();

    let with_gt = |name: &str,
                       f: &dyn Fn(&mut Tape<f64>, Var, Var) -> Result<Var>|
     -> Result<CheckResult> {
        let gt = gt_img.clone();
        run(name, LOSS_TOL, &[out_img.clone()], seed, move |t, v| {
            let g = t.constant(gt.clone());
            f(t, v[0], g)
        })
    };
    results.push(with_gt("l1_loss", &|t, o, g| l1_loss(t, o, g))?);
    results.push(with_gt("ssim", &|t, o, g| ssim_op(t, o, g, 1.0))?);
    results.push(with_gt("wavelet_mse_loss", &|t, o, g| wavelet_mse_loss(t, o, g))?);
    results.push(with_gt("wavelet_ssim_loss", &|t, o, g| {
        wavelet_ssim_loss(t, o, g, &LossWeights::default())
    })?);
    results.push(with_gt("total_loss", &|t, o, g| {
        total_loss(t, o, g, &LossWeights::default())
    })?);
    Ok(results)
}

/// End-to-end check on the tiny network: total loss differentiated with
/// respect to a sampled subset of parameters, against central
/// differences computed through full re-forwards.
pub fn network_check(seed: u64, coords_per_param: usize, param_stride: usize) -> Result<CheckResult> {
    let cfg = ModelConfig::tiny();
    let mut params = build::<f64>(&cfg, seed)?;
    // Jitter every parameter off its init. At init the zero biases and
    // betas park dead channels exactly on the relu kink, where the
    // (valid) zero subgradient disagrees with central differences.
    let mut jitter = Rng::new(seed ^ 0x6a69_7474);
    for t in params.tensors.values_mut() {
        for v in t.data.iter_mut() {
            *v += jitter.uniform(-0.05, 0.05);
        }
    }
    // The sample only supplies realistic input/target statistics.
    let (dark, bright) = synthetic_dataset(1, 32, 32, 8.0, seed).remove(0);
    let target: Tensor<f64> = bright.cast();

    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let packed = packed_to_tensor(&dark);
    let green = extract_green::<f64>(&dark);
    let fwd = forward(&mut tape, &mut params, &cfg, &packed, &green, true)?;
    let gt = tape.constant(target.clone());
    let loss = total_loss(&mut tape, fwd.out, gt, &LossWeights::default())?;
    let grads = tape.backward(loss)?;

    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut rng = Rng::new(seed ^ 0x6e65_7477);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for name in names.iter().step_by(param_stride.max(1)) {
        let var = fwd.param_vars[name];
        let analytic = grads.get(var).cloned();
        let n = params.tensors[name].numel();
        for _ in 0..coords_per_param {
            let ci = rng.below(n);
            let orig = params.tensors.get_mut(name).unwrap().data[ci];
            let fd = |params: &mut crate::model::ErienetParams<f64>, v: f64| -> Result<f64> {
                params.tensors.get_mut(name).unwrap().data[ci] = v;
                let mut t = Tape::<f64>::new();
                let fw = forward(&mut t, params, &cfg, &packed, &green, true)?;
                let g = t.constant(target.clone());
                let l = total_loss(&mut t, fw.out, g, &LossWeights::default())?;
                Ok(t.value(l).scalar_value())
            };
            let fp = fd(&mut params, orig + H)?;
            let fm = fd(&mut params, orig - H)?;
            params.tensors.get_mut(name).unwrap().data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.as_ref().map_or(0.0, |g| g.data[ci]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: "erienet-tiny end-to-end".into(),
        max_rel_err: worst,
        tol: NETWORK_TOL,
        coords: checked,
    })
}

fn packed_to_tensor(p: &PackedRaw) -> Tensor<f64> {
    Tensor::new(
        [1, 4, p.height, p.width],
        p.data.iter().map(|&v| v as f64).collect(),
    )
    .expect("packed raw is dense")
}

/// Ops + losses + network, in that order.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_checks(seed)?;
    all.extend(loss_checks(seed)?);
    all.push(network_check(seed, 2, 3)?);
    Ok(all)
}
