//! Batch and layer normalization.

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Running statistics for one batch-norm site. Built models initialize
/// these to mean 0 / variance 1 so eval works before any training step.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub label: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnStats<T> {
    pub fn uninitialized(label: impl Into<String>, channels: usize) -> Self {
        BnStats {
            label: label.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Mean 0, variance 1, marked usable for eval.
    pub fn identity(label: impl Into<String>, channels: usize) -> Self {
        BnStats { initialized: true, ..Self::uninitialized(label, channels) }
    }

    pub fn cast<U: Scalar>(&self) -> BnStats<U> {
        BnStats {
            label: self.label.clone(),
            mean: self.mean.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            var: self.var.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            initialized: self.initialized,
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over (batch, H, W) per channel.
    ///
    /// Train mode normalizes by batch statistics (biased variance) and
    /// updates `stats` in place with the given momentum. Eval mode uses the
    /// running statistics and errors if they were never recorded or
    /// explicitly initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        stats: &mut BnStats<T>,
        train: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        let (bn, cn, hw) = (s[0], s[1], s[2] * s[3]);
        self.check_affine("batch_norm", cn, gamma, beta)?;
        if stats.mean.len() != cn {
            return Err(Error::shape(
                "batch_norm",
                format!("stats track {} channels, input has {}", stats.mean.len(), cn),
            ));
        }
        let eps_t = T::from_f64(eps);

        if !train {
            if !stats.initialized {
                return Err(Error::UninitializedStats(stats.label.clone()));
            }
            let mean = stats.mean.clone();
            let istd: Vec<T> =
                stats.var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            return Ok(self.affine_normalize_fixed(x, gamma, beta, mean, istd));
        }

        let n = bn * hw;
        let inv_n = T::from_f64(1.0 / n as f64);
        let xv = &self.vals[x.0];
        let mut mean = vec![T::zero(); cn];
        let mut var = vec![T::zero(); cn];
        for bi in 0..bn {
            for c in 0..cn {
                let base = (bi * cn + c) * hw;
                for i in 0..hw {
                    mean[c] += xv.data[base + i];
                }
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        for bi in 0..bn {
            for c in 0..cn {
                let base = (bi * cn + c) * hw;
                for i in 0..hw {
                    let d = xv.data[base + i] - mean[c];
                    var[c] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }
        let mom = T::from_f64(momentum);
        for c in 0..cn {
            if stats.initialized {
                stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c];
            } else {
                stats.mean[c] = mean[c];
                stats.var[c] = var[c];
            }
        }
        stats.initialized = true;

        let istd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); bn * cn * hw];
        for bi in 0..bn {
            for c in 0..cn {
                let base = (bi * cn + c) * hw;
                for i in 0..hw {
                    xhat[base + i] = (xv.data[base + i] - mean[c]) * istd[c];
                }
            }
        }
        let mut data = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.vals[g.0].data;
            for bi in 0..bn {
                for c in 0..cn {
                    let base = (bi * cn + c) * hw;
                    for i in 0..hw {
                        data[base + i] *= gv[c];
                    }
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.vals[b.0].data;
            for bi in 0..bn {
                for c in 0..cn {
                    let base = (bi * cn + c) * hw;
                    for i in 0..hw {
                        data[base + i] += bv[c];
                    }
                }
            }
        }
        let out = Tensor { shape: s, data };
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                // Standard train-mode BN backward using saved xhat/istd.
                let mut dxhat_sum = vec![T::zero(); cn];
                let mut dxhat_xhat_sum = vec![T::zero(); cn];
                let gamma_v = gamma.map(|g| vals[g.0].data.clone());
                let dyhat = |bi: usize, c: usize, i: usize| {
                    let g = gout.data[(bi * cn + c) * hw + i];
                    match &gamma_v {
                        Some(gv) => g * gv[c],
                        None => g,
                    }
                };
                for bi in 0..bn {
                    for c in 0..cn {
                        let base = (bi * cn + c) * hw;
                        for i in 0..hw {
                            let d = dyhat(bi, c, i);
                            dxhat_sum[c] += d;
                            dxhat_xhat_sum[c] += d * xhat[base + i];
                        }
                    }
                }
                {
                    let gx = sink.slot(x.0, bn * cn * hw);
                    let n_t = T::from_f64(n as f64);
                    for bi in 0..bn {
                        for c in 0..cn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                let d = dyhat(bi, c, i);
                                gx[base + i] += istd[c] * inv_n
                                    * (n_t * d - dxhat_sum[c] - xhat[base + i] * dxhat_xhat_sum[c]);
                            }
                        }
                    }
                }
                if let Some(g) = gamma {
                    let gg = sink.slot(g.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i] * xhat[base + i];
                            }
                        }
                        gg[c] += acc;
                    }
                }
                if let Some(b) = beta {
                    let gb = sink.slot(b.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i];
                            }
                        }
                        gb[c] += acc;
                    }
                }
            }),
        ))
    }

    /// Layer normalization over (C,H,W) per sample, per-channel affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        let (bn, cn, hw) = (s[0], s[1], s[2] * s[3]);
        self.check_affine("layer_norm", cn, gamma, beta)?;
        let n = cn * hw;
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps_t = T::from_f64(eps);
        let xv = &self.vals[x.0];
        let mut mean = vec![T::zero(); bn];
        let mut istd = vec![T::zero(); bn];
        let mut xhat = vec![T::zero(); bn * n];
        for bi in 0..bn {
            let base = bi * n;
            let mut m = T::zero();
            for i in 0..n {
                m += xv.data[base + i];
            }
            m *= inv_n;
            let mut v = T::zero();
            for i in 0..n {
                let d = xv.data[base + i] - m;
                v += d * d;
            }
            v *= inv_n;
            let is = T::one() / (v + eps_t).sqrt();
            mean[bi] = m;
            istd[bi] = is;
            for i in 0..n {
                xhat[base + i] = (xv.data[base + i] - m) * is;
            }
        }
        let _ = mean;
        let mut data = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.vals[g.0].data;
            for bi in 0..bn {
                for c in 0..cn {
                    let base = (bi * cn + c) * hw;
                    for i in 0..hw {
                        data[base + i] *= gv[c];
                    }
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.vals[b.0].data;
            for bi in 0..bn {
                for c in 0..cn {
                    let base = (bi * cn + c) * hw;
                    for i in 0..hw {
                        data[base + i] += bv[c];
                    }
                }
            }
        }
        let out = Tensor { shape: s, data };
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let gamma_v = gamma.map(|g| vals[g.0].data.clone());
                let dyhat = |bi: usize, c: usize, i: usize| {
                    let g = gout.data[(bi * cn + c) * hw + i];
                    match &gamma_v {
                        Some(gv) => g * gv[c],
                        None => g,
                    }
                };
                {
                    let gx = sink.slot(x.0, bn * n);
                    let n_t = T::from_f64(n as f64);
                    for bi in 0..bn {
                        let base = bi * n;
                        let mut dsum = T::zero();
                        let mut dxsum = T::zero();
                        for c in 0..cn {
                            for i in 0..hw {
                                let d = dyhat(bi, c, i);
                                dsum += d;
                                dxsum += d * xhat[base + c * hw + i];
                            }
                        }
                        for c in 0..cn {
                            for i in 0..hw {
                                let d = dyhat(bi, c, i);
                                gx[base + c * hw + i] += istd[bi] * inv_n
                                    * (n_t * d - dsum - xhat[base + c * hw + i] * dxsum);
                            }
                        }
                    }
                }
                if let Some(g) = gamma {
                    let gg = sink.slot(g.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i] * xhat[bi * n + c * hw + i];
                            }
                        }
                        gg[c] += acc;
                    }
                }
                if let Some(b) = beta {
                    let gb = sink.slot(b.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i];
                            }
                        }
                        gb[c] += acc;
                    }
                }
            }),
        ))
    }

    fn check_affine(
        &self,
        op: &'static str,
        channels: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
    ) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if let Some(v) = v {
                let n = self.value(v).numel();
                if n != channels {
                    return Err(Error::shape(
                        op,
                        format!("{} has {} elements, expected {} channels", name, n, channels),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Eval-mode normalization with fixed (non-differentiated) mean/istd,
    /// plus optional per-channel affine. Differentiable in x, gamma, beta.
    fn affine_normalize_fixed(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        istd: Vec<T>,
    ) -> Var {
        let s = self.shape(x);
        let (bn, cn, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = &self.vals[x.0];
        let gv = gamma.map(|g| self.vals[g.0].data.clone());
        let bv = beta.map(|b| self.vals[b.0].data.clone());
        let mut data = vec![T::zero(); bn * cn * hw];
        let mut xhat = vec![T::zero(); bn * cn * hw];
        for bi in 0..bn {
            for c in 0..cn {
                let base = (bi * cn + c) * hw;
                for i in 0..hw {
                    let xh = (xv.data[base + i] - mean[c]) * istd[c];
                    xhat[base + i] = xh;
                    let mut v = xh;
                    if let Some(g) = &gv {
                        v *= g[c];
                    }
                    if let Some(b) = &bv {
                        v += b[c];
                    }
                    data[base + i] = v;
                }
            }
        }
        let out = Tensor { shape: s, data };
        self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let gamma_v = gamma.map(|g| vals[g.0].data.clone());
                {
                    let gx = sink.slot(x.0, bn * cn * hw);
                    for bi in 0..bn {
                        for c in 0..cn {
                            let base = (bi * cn + c) * hw;
                            let scale = match &gamma_v {
                                Some(gv) => gv[c] * istd[c],
                                None => istd[c],
                            };
                            for i in 0..hw {
                                gx[base + i] += gout.data[base + i] * scale;
                            }
                        }
                    }
                }
                if let Some(g) = gamma {
                    let gg = sink.slot(g.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i] * xhat[base + i];
                            }
                        }
                        gg[c] += acc;
                    }
                }
                if let Some(b) = beta {
                    let gb = sink.slot(b.0, cn);
                    for c in 0..cn {
                        let mut acc = T::zero();
                        for bi in 0..bn {
                            let base = (bi * cn + c) * hw;
                            for i in 0..hw {
                                acc += gout.data[base + i];
                            }
                        }
                        gb[c] += acc;
                    }
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn channel_stats(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let [bn, cn, h, w] = t.shape;
        let n = (bn * h * w) as f64;
        let mut mean = 0.0;
        for bi in 0..bn {
            for y in 0..h {
                for x in 0..w {
                    mean += t.at(bi, c, y, x);
                }
            }
        }
        mean /= n;
        let mut var = 0.0;
        for bi in 0..bn {
            for y in 0..h {
                for x in 0..w {
                    var += (t.at(bi, c, y, x) - mean).powi(2);
                }
            }
        }
        let _ = cn;
        (mean, var / n)
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform([2, 3, 4, 4], -3.0, 5.0, &mut rng), false);
        let mut stats = BnStats::uninitialized("t", 3);
        let y = tape.batch_norm(x, None, None, &mut stats, true, 1e-5, 0.1).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(tape.value(y), c);
            assert!(m.abs() < 1e-4, "mean {}", m);
            assert!((v - 1.0).abs() < 1e-3, "var {}", v);
        }
    }

    #[test]
    fn affine_shifts_and_scales() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform([2, 2, 4, 4], -1.0, 1.0, &mut rng), false);
        let g = tape.leaf(Tensor::full([1, 2, 1, 1], 2.0), false);
        let b = tape.leaf(Tensor::full([1, 2, 1, 1], 3.0), false);
        let mut stats = BnStats::uninitialized("t", 2);
        let y = tape.batch_norm(x, Some(g), Some(b), &mut stats, true, 1e-5, 0.1).unwrap();
        for c in 0..2 {
            let (m, v) = channel_stats(tape.value(y), c);
            assert!((m - 3.0).abs() < 1e-4);
            assert!((v.sqrt() - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_yields_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 4, 4], 5.0), false);
        let g = tape.leaf(Tensor::full([1, 1, 1, 1], 1.0), false);
        let b = tape.leaf(Tensor::full([1, 1, 1, 1], 0.7), false);
        let mut stats = BnStats::uninitialized("t", 1);
        let y = tape.batch_norm(x, Some(g), Some(b), &mut stats, true, 1e-5, 0.1).unwrap();
        for &v in &tape.value(y).data {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_before_stats_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 2, 2]), false);
        let mut stats = BnStats::uninitialized("site", 2);
        assert!(tape.batch_norm(x, None, None, &mut stats, false, 1e-5, 0.1).is_err());
        let mut ok = BnStats::identity("site", 2);
        assert!(tape.batch_norm(x, None, None, &mut ok, false, 1e-5, 0.1).is_ok());
    }

    #[test]
    fn layer_norm_per_sample() {
        let mut rng = Rng::new(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform([3, 2, 4, 4], -2.0, 6.0, &mut rng), false);
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        let yv = tape.value(y);
        for bi in 0..3 {
            let n = 2 * 16;
            let mut m = 0.0;
            let mut v = 0.0;
            for i in 0..n {
                m += yv.data[bi * n + i];
            }
            m /= n as f64;
            for i in 0..n {
                v += (yv.data[bi * n + i] - m).powi(2);
            }
            v /= n as f64;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_update() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 4.0), false);
        let mut stats = BnStats::uninitialized("t", 1);
        tape.batch_norm(x, None, None, &mut stats, true, 1e-5, 0.1).unwrap();
        // First train step adopts batch stats directly.
        assert!((stats.mean[0] - 4.0).abs() < 1e-12);
        assert!(stats.var[0].abs() < 1e-12);
    }
}
