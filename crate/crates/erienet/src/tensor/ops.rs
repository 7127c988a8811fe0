//! Elementwise, reduction and rearrangement operators.

use super::tape::{Tape, Var};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(T, T) -> T,
        // (a_val, b_val, g_out) -> (g_a, g_b)
        bwd: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("lhs {:?} vs rhs {:?}", sa, sb)));
        }
        let out = Tensor {
            shape: sa,
            data: self.vals[a.0]
                .data
                .iter()
                .zip(&self.vals[b.0].data)
                .map(|(&x, &y)| fwd(x, y))
                .collect(),
        };
        let n = out.numel();
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                {
                    let ga = sink.slot(a.0, n);
                    for i in 0..n {
                        ga[i] += bwd(vals[a.0].data[i], vals[b.0].data[i], gout.data[i]).0;
                    }
                }
                let gb = sink.slot(b.0, n);
                for i in 0..n {
                    gb[i] += bwd(vals[a.0].data[i], vals[b.0].data[i], gout.data[i]).1;
                }
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    /// Elementwise product. The right-hand side may broadcast from
    /// (1,1,1,1) or (B,C,1,1) over the left-hand shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x));
        }
        let scalar_rhs = sb == [1, 1, 1, 1];
        let channel_rhs = sb == [sa[0], sa[1], 1, 1];
        if !scalar_rhs && !channel_rhs {
            return Err(Error::shape(
                "mul",
                format!("cannot broadcast rhs {:?} over lhs {:?}", sb, sa),
            ));
        }
        let (bn, cn, hw) = (sa[0], sa[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(numel(sa));
        {
            let (av, bv) = (&self.vals[a.0].data, &self.vals[b.0].data);
            for b_i in 0..bn {
                for c_i in 0..cn {
                    let s = if scalar_rhs { bv[0] } else { bv[b_i * cn + c_i] };
                    let base = (b_i * cn + c_i) * hw;
                    for i in 0..hw {
                        data.push(av[base + i] * s);
                    }
                }
            }
        }
        let out = Tensor { shape: sa, data };
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let n = bn * cn * hw;
                {
                    let ga = sink.slot(a.0, n);
                    let bv = &vals[b.0].data;
                    for b_i in 0..bn {
                        for c_i in 0..cn {
                            let s = if scalar_rhs { bv[0] } else { bv[b_i * cn + c_i] };
                            let base = (b_i * cn + c_i) * hw;
                            for i in 0..hw {
                                ga[base + i] += gout.data[base + i] * s;
                            }
                        }
                    }
                }
                let gb = sink.slot(b.0, if scalar_rhs { 1 } else { bn * cn });
                let av = &vals[a.0].data;
                for b_i in 0..bn {
                    for c_i in 0..cn {
                        let base = (b_i * cn + c_i) * hw;
                        let mut acc = T::zero();
                        for i in 0..hw {
                            acc += gout.data[base + i] * av[base + i];
                        }
                        if scalar_rhs {
                            gb[0] += acc;
                        } else {
                            gb[b_i * cn + c_i] += acc;
                        }
                    }
                }
            }),
        ))
    }

    fn unary(
        &mut self,
        x: Var,
        fwd: impl Fn(T) -> T,
        // (x_val, out_val, g_out) -> g_x
        bwd: impl Fn(T, T, T) -> T + 'static,
    ) -> Var {
        let out_id_shape = self.shape(x);
        let out = Tensor {
            shape: out_id_shape,
            data: self.vals[x.0].data.iter().map(|&v| fwd(v)).collect(),
        };
        let n = out.numel();
        let out_idx = self.len(); // id the pushed value will get
        self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let gx = sink.slot(x.0, n);
                for i in 0..n {
                    gx[i] += bwd(vals[x.0].data[i], vals[out_idx].data[i], gout.data[i]);
                }
            }),
        )
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, |v| v + c, |_, _, g| g)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, |v| v * c, move |_, _, g| g * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -1.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v, _, g| if v >= T::zero() { g } else { -g },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _, g| if v > T::zero() { g } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, o, g| g * o * (T::one() - o),
        )
    }

    /// Clamp to [0,1]; gradient passes only strictly inside the range.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()).min(T::one()),
            |v, _, g| if v > T::zero() && v < T::one() { g } else { T::zero() },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.vals[x.0].data.iter().copied().sum();
        let n = self.vals[x.0].numel();
        self.push(
            Tensor { shape: [1, 1, 1, 1], data: vec![s] },
            Box::new(move |_, gout, sink| {
                let g = gout.data[0];
                let gx = sink.slot(x.0, n);
                for v in gx.iter_mut() {
                    *v += g;
                }
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let s = self.sum_all(x);
        self.mul_const(s, 1.0 / n as f64)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels", "empty input list"));
        }
        let s0 = self.shape(xs[0]);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("batch/spatial mismatch: {:?} vs {:?}", s, s0),
                ));
            }
            c_total += s[1];
        }
        let (bn, h, w) = (s0[0], s0[2], s0[3]);
        let hw = h * w;
        let mut data = Vec::with_capacity(bn * c_total * hw);
        for b in 0..bn {
            for &x in xs {
                let t = &self.vals[x.0];
                let c = t.shape[1];
                let base = b * c * hw;
                data.extend_from_slice(&t.data[base..base + c * hw]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let chans: Vec<usize> = xs.iter().map(|v| self.shape(*v)[1]).collect();
        let out = Tensor { shape: [bn, c_total, h, w], data };
        Ok(self.push(
            out,
            Box::new(move |_, gout, sink| {
                for (part, (&id, &c)) in ids.iter().zip(&chans).enumerate() {
                    let offset: usize = chans[..part].iter().sum();
                    let gx = sink.slot(id, bn * c * hw);
                    for b in 0..bn {
                        let src = (b * c_total + offset) * hw;
                        let dst = b * c * hw;
                        for i in 0..c * hw {
                            gx[dst + i] += gout.data[src + i];
                        }
                    }
                }
            }),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("range {}..{} out of {} channels", start, start + len, s[1]),
            ));
        }
        let (bn, cn, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(bn * len * hw);
        for b in 0..bn {
            let base = (b * cn + start) * hw;
            data.extend_from_slice(&self.vals[x.0].data[base..base + len * hw]);
        }
        let out = Tensor { shape: [bn, len, s[2], s[3]], data };
        Ok(self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cn * hw);
                for b in 0..bn {
                    let dst = (b * cn + start) * hw;
                    let src = b * len * hw;
                    for i in 0..len * hw {
                        gx[dst + i] += gout.data[src + i];
                    }
                }
            }),
        ))
    }

    /// Per-channel spatial mean, shape (B,C,1,1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (bn, cn, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::from_f64(1.0 / hw as f64);
        let mut data = Vec::with_capacity(bn * cn);
        for bc in 0..bn * cn {
            let base = bc * hw;
            let sum: T = self.vals[x.0].data[base..base + hw].iter().copied().sum();
            data.push(sum * inv);
        }
        let out = Tensor { shape: [bn, cn, 1, 1], data };
        self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cn * hw);
                for bc in 0..bn * cn {
                    let g = gout.data[bc] * inv;
                    let base = bc * hw;
                    for i in 0..hw {
                        gx[base + i] += g;
                    }
                }
            }),
        )
    }

    /// Average over non-overlapping factor x factor blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("spatial dims {}x{} not divisible by factor {}", s[2], s[3], factor),
            ));
        }
        let (bn, cn, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / factor, w / factor);
        let inv = T::from_f64(1.0 / (factor * factor) as f64);
        let xv = &self.vals[x.0];
        let mut data = Vec::with_capacity(bn * cn * oh * ow);
        for bc in 0..bn * cn {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += xv.data[(bc * h + oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    data.push(acc * inv);
                }
            }
        }
        let out = Tensor { shape: [bn, cn, oh, ow], data };
        Ok(self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cn * h * w);
                for bc in 0..bn * cn {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout.data[(bc * oh + oy) * ow + ox] * inv;
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    gx[(bc * h + oy * factor + dy) * w + ox * factor + dx] += g;
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Bilinear 2x upsampling with half-pixel centers (align-corners=false).
    ///
    /// Output pixel `o` samples the input at `s = (o + 0.5)/2 - 0.5`; the
    /// two nearest input taps `floor(s)` and `floor(s)+1` are clamped to the
    /// valid range and blended with weight `s - floor(s)`. For 2x this
    /// means interior weights are exactly 0.25/0.75, so the op is
    /// bit-reproducible.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (bn, cn, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        // Precompute 1-D taps: (lo_index, hi_index, hi_weight).
        let taps = |n: usize, on: usize| -> Vec<(usize, usize, T)> {
            (0..on)
                .map(|o| {
                    let src = (o as f64 + 0.5) / 2.0 - 0.5;
                    let lo = src.floor();
                    let frac = src - lo;
                    let i0 = (lo.max(0.0) as usize).min(n - 1);
                    let i1 = ((lo + 1.0).max(0.0) as usize).min(n - 1);
                    (i0, i1, T::from_f64(frac))
                })
                .collect()
        };
        let ty = taps(h, oh);
        let tx = taps(w, ow);
        let xv = &self.vals[x.0];
        let mut data = Vec::with_capacity(bn * cn * oh * ow);
        for bc in 0..bn * cn {
            let base = bc * h * w;
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let one = T::one();
                    let v = xv.data[base + y0 * w + x0] * (one - wy) * (one - wx)
                        + xv.data[base + y0 * w + x1] * (one - wy) * wx
                        + xv.data[base + y1 * w + x0] * wy * (one - wx)
                        + xv.data[base + y1 * w + x1] * wy * wx;
                    data.push(v);
                }
            }
        }
        let out = Tensor { shape: [bn, cn, oh, ow], data };
        self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cn * h * w);
                for bc in 0..bn * cn {
                    let base = bc * h * w;
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let g = gout.data[(bc * oh + oy) * ow + ox];
                            let one = T::one();
                            gx[base + y0 * w + x0] += g * (one - wy) * (one - wx);
                            gx[base + y0 * w + x1] += g * (one - wy) * wx;
                            gx[base + y1 * w + x0] += g * wy * (one - wx);
                            gx[base + y1 * w + x1] += g * wy * wx;
                        }
                    }
                }
            }),
        )
    }

    /// Sub-pixel rearrangement: (B, C*r^2, H, W) -> (B, C, rH, rW).
    /// Element (b, c*r^2 + dy*r + dx, y, x) maps to (b, c, r*y+dy, r*x+dx).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x);
        if r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("channels {} not divisible by r^2 = {}", s[1], r * r),
            ));
        }
        let (bn, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let cout = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let xv = &self.vals[x.0];
        let mut data = vec![T::zero(); bn * cout * oh * ow];
        for b in 0..bn {
            for c in 0..cout {
                for dy in 0..r {
                    for dx in 0..r {
                        let ci = c * r * r + dy * r + dx;
                        for y in 0..h {
                            for xx in 0..w {
                                let src = ((b * cin + ci) * h + y) * w + xx;
                                let dst = ((b * cout + c) * oh + r * y + dy) * ow + r * xx + dx;
                                data[dst] = xv.data[src];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor { shape: [bn, cout, oh, ow], data };
        Ok(self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cin * h * w);
                for b in 0..bn {
                    for c in 0..cout {
                        for dy in 0..r {
                            for dx in 0..r {
                                let ci = c * r * r + dy * r + dx;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let src = ((b * cin + ci) * h + y) * w + xx;
                                        let dst =
                                            ((b * cout + c) * oh + r * y + dy) * ow + r * xx + dx;
                                        gx[src] += gout.data[dst];
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// One level of the orthonormal 2-D Haar transform, bands stacked along
    /// channels as [LL | HL | LH | HH]: (B,C,H,W) -> (B,4C,H/2,W/2).
    ///
    /// Per 2x2 block [[a,b],[c,d]]: LL=(a+b+c+d)/2, HL=(a-b+c-d)/2,
    /// LH=(a+b-c-d)/2, HH=(a-b-c+d)/2.
    pub fn haar_dwt2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(
                "haar_dwt2d",
                format!("spatial dims {}x{} must be even", s[2], s[3]),
            ));
        }
        let (bn, cn, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let half = T::from_f64(0.5);
        let xv = &self.vals[x.0];
        let mut data = vec![T::zero(); bn * 4 * cn * oh * ow];
        let band_stride = cn * oh * ow;
        for b in 0..bn {
            for c in 0..cn {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (b * cn + c) * h * w;
                        let a = xv.data[base + (2 * oy) * w + 2 * ox];
                        let bb = xv.data[base + (2 * oy) * w + 2 * ox + 1];
                        let cc = xv.data[base + (2 * oy + 1) * w + 2 * ox];
                        let d = xv.data[base + (2 * oy + 1) * w + 2 * ox + 1];
                        let o = b * 4 * band_stride + (c * oh + oy) * ow + ox;
                        data[o] = (a + bb + cc + d) * half;
                        data[o + band_stride] = (a - bb + cc - d) * half;
                        data[o + 2 * band_stride] = (a + bb - cc - d) * half;
                        data[o + 3 * band_stride] = (a - bb - cc + d) * half;
                    }
                }
            }
        }
        let out = Tensor { shape: [bn, 4 * cn, oh, ow], data };
        Ok(self.push(
            out,
            Box::new(move |_, gout, sink| {
                let gx = sink.slot(x.0, bn * cn * h * w);
                for b in 0..bn {
                    for c in 0..cn {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = b * 4 * band_stride + (c * oh + oy) * ow + ox;
                                let gll = gout.data[o];
                                let ghl = gout.data[o + band_stride];
                                let glh = gout.data[o + 2 * band_stride];
                                let ghh = gout.data[o + 3 * band_stride];
                                let base = (b * cn + c) * h * w;
                                gx[base + (2 * oy) * w + 2 * ox] +=
                                    (gll + ghl + glh + ghh) * half;
                                gx[base + (2 * oy) * w + 2 * ox + 1] +=
                                    (gll - ghl + glh - ghh) * half;
                                gx[base + (2 * oy + 1) * w + 2 * ox] +=
                                    (gll + ghl - glh - ghh) * half;
                                gx[base + (2 * oy + 1) * w + 2 * ox + 1] +=
                                    (gll - ghl - glh + ghh) * half;
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Grads, Tape, Tensor};

    fn t(shape: [usize; 4], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 2], &[-1.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data[0], 0.5);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let loss = tape.sum_all(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let mut grads = Grads::new();
        tape.backward_into(loss, &mut grads).unwrap();
        tape.backward_into(loss, &mut grads).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![4.0, 8.0, 12.0]);
    }

    #[test]
    fn concat_shapes_and_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full([1, 3, 2, 2], 1.0), true);
        let b = tape.leaf(Tensor::full([1, 5, 2, 2], 2.0), true);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), [1, 8, 2, 2]);
        let loss = tape.sum_all(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data, vec![1.0; 12]);
        assert_eq!(g.get(b).unwrap().data, vec![1.0; 20]);
    }

    #[test]
    fn concat_of_one_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let c = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(c).data, tape.value(a).data);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros([1, 1, 3, 2]), false);
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn global_avg_pool_values_and_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let p = tape.global_avg_pool(x);
        assert_eq!(tape.value(p).data, vec![2.5]);
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![0.25; 4]);
    }

    #[test]
    fn gap_constant_image() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2, 3, 4, 4], 7.5), false);
        let p = tape.global_avg_pool(x);
        assert!(tape.value(p).data.iter().all(|&v| (v - 7.5f64).abs() < 1e-12));
    }

    #[test]
    fn avg_pool_factor2() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(p).data, vec![2.5]);
    }

    #[test]
    fn avg_pool_rejects_indivisible() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 3, 4]), false);
        assert!(tape.avg_pool(x, 2).is_err());
    }

    #[test]
    fn upsample_constant_and_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 2, 3, 5], 4.0), false);
        let u = tape.bilinear_upsample2x(x);
        assert_eq!(tape.shape(u), [1, 2, 6, 10]);
        assert!(tape.value(u).data.iter().all(|&v| (v - 4.0f64).abs() < 1e-12));
    }

    #[test]
    fn pixel_shuffle_shape_and_index_map() {
        // Brute-enumerate the index oracle on (1,12,2,2), r=2.
        let n = 12 * 2 * 2;
        let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 12, 2, 2], &vals), false);
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), [1, 3, 4, 4]);
        let yv = tape.value(y).clone();
        let xv = tape.value(x).clone();
        for c in 0..3 {
            for yy in 0..2 {
                for xx in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            assert_eq!(
                                yv.at(0, c, 2 * yy + dy, 2 * xx + dx),
                                xv.at(0, c * 4 + 2 * dy + dx, yy, xx)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 7, 2, 2]), false);
        assert!(tape.pixel_shuffle(x, 2).is_err());
    }

    #[test]
    fn haar_block_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.haar_dwt2d(x).unwrap();
        let v = &tape.value(y).data;
        assert_eq!(v.as_slice(), &[5.0, -1.0, -2.0, 0.0]);
    }

    #[test]
    fn haar_constant_plane() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 4, 4], 3.0), false);
        let y = tape.haar_dwt2d(x).unwrap();
        let v = tape.value(y);
        for i in 0..4 {
            assert_eq!(v.at(0, 0, i / 2, i % 2), 6.0); // LL = 2c
        }
        for band in 1..4 {
            for i in 0..4 {
                assert_eq!(v.at(0, band, i / 2, i % 2), 0.0);
            }
        }
    }

    #[test]
    fn clamp01_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 3], &[-0.5, 0.5, 1.5]), false);
        let y = tape.clamp01(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.5, 1.0]);
    }
}
