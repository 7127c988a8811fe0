//! Convolution operators: dense 2-D, depthwise, depthwise-separable and the
//! 1-D cross-channel convolution used by ECA.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [bn, cin, h, wd] = x.shape;
    let [cout, _, k, _] = w.shape;
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let mut data = vec![T::zero(); bn * cout * oh * ow];
    // Each (batch, out-channel) plane is independent; inner accumulation is
    // sequential so the result is bitwise deterministic.
    data.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, plane)| {
        let bi = bc / cout;
        let co = bc % cout;
        let bias = b.map_or(T::zero(), |t| t.data[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..cin {
                    let xbase = (bi * cin + ci) * h * wd;
                    let wbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * wd;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data[row + ix as usize] * w.data[wrow + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor { shape: [bn, cout, oh, ow], data }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    gx: &mut [T],
    gw: &mut [T],
    gb: Option<&mut [T]>,
) {
    let [bn, cin, h, wd] = x.shape;
    let [cout, _, k, _] = w.shape;
    let [_, _, oh, ow] = gout.shape;
    for bi in 0..bn {
        for co in 0..cout {
            let gbase = (bi * cout + co) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout.data[gbase + oy * ow + ox];
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * wd + ix as usize;
                                gx[xi] += g * w.data[wbase + ky * k + kx];
                                gw[wbase + ky * k + kx] += g * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for bi in 0..bn {
            for co in 0..cout {
                let gbase = (bi * cout + co) * oh * ow;
                for i in 0..oh * ow {
                    gb[co] += gout.data[gbase + i];
                }
            }
        }
    }
}

fn depthwise_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [bn, cn, h, wd] = x.shape;
    let k = w.shape[2];
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let mut data = vec![T::zero(); bn * cn * oh * ow];
    data.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, plane)| {
        let c = bc % cn;
        let bias = b.map_or(T::zero(), |t| t.data[c]);
        let xbase = bc * h * wd;
        let wbase = c * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += x.data[xbase + iy as usize * wd + ix as usize]
                            * w.data[wbase + ky * k + kx];
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor { shape: [bn, cn, oh, ow], data }
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution, zero padding. Weight shape (Cout, Cin, k, k);
    /// optional bias shape (1, Cout, 1, 1) or (Cout,1,1,1)-equivalent length.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {} input channels, input has {}", ws[1], xs[1]),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {}x{}", ws[2], ws[3]),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {}", xs[2], xs[3], ws[2]),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).numel();
            if bs != ws[0] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} elements, expected Cout = {}", bs, ws[0]),
                ));
            }
        }
        let out = conv2d_fwd(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|b| &self.vals[b.0]),
            stride,
            pad,
        );
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gw = vec![T::zero(); wv.numel()];
                let mut gb = b.map(|b| vec![T::zero(); vals[b.0].numel()]);
                conv2d_bwd(xv, wv, gout, stride, pad, &mut gx, &mut gw, gb.as_deref_mut());
                let sx = sink.slot(x.0, gx.len());
                for (a, v) in sx.iter_mut().zip(&gx) {
                    *a += *v;
                }
                let sw = sink.slot(w.0, gw.len());
                for (a, v) in sw.iter_mut().zip(&gw) {
                    *a += *v;
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    let sb = sink.slot(b.0, gb.len());
                    for (a, v) in sb.iter_mut().zip(&gb) {
                        *a += *v;
                    }
                }
            }),
        ))
    }

    /// Depthwise convolution: weight shape (C, 1, k, k), one spatial filter
    /// per input channel.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[0] != xs[1] || ws[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?} incompatible with {} input channels", ws, xs[1]),
            ));
        }
        let out = depthwise_fwd(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|b| &self.vals[b.0]),
            stride,
            pad,
        );
        let k = ws[2];
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let [bn, cn, h, wd] = xv.shape;
                let [_, _, oh, ow] = gout.shape;
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gw = vec![T::zero(); wv.numel()];
                let mut gb = b.map(|_| vec![T::zero(); cn]);
                for bi in 0..bn {
                    for c in 0..cn {
                        let bc = bi * cn + c;
                        let gbase = bc * oh * ow;
                        let xbase = bc * h * wd;
                        let wbase = c * k * k;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gout.data[gbase + oy * ow + ox];
                                if let Some(gb) = gb.as_mut() {
                                    gb[c] += g;
                                }
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * wd + ix as usize;
                                        gx[xi] += g * wv.data[wbase + ky * k + kx];
                                        gw[wbase + ky * k + kx] += g * xv.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let sx = sink.slot(x.0, gx.len());
                for (a, v) in sx.iter_mut().zip(&gx) {
                    *a += *v;
                }
                let sw = sink.slot(w.0, gw.len());
                for (a, v) in sw.iter_mut().zip(&gw) {
                    *a += *v;
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    let sb = sink.slot(b.0, gb.len());
                    for (a, v) in sb.iter_mut().zip(&gb) {
                        *a += *v;
                    }
                }
            }),
        ))
    }

    /// Depthwise-separable convolution: depthwise k x k followed by a 1x1
    /// pointwise convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        dw_weight: Var,
        dw_bias: Option<Var>,
        pw_weight: Var,
        pw_bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mid = self.depthwise_conv2d(x, dw_weight, dw_bias, stride, pad)?;
        self.conv2d(mid, pw_weight, pw_bias, 1, 0)
    }

    /// Treats the channel axis of a (B,C,1,1) tensor as a 1-D signal and
    /// convolves it with an odd-length kernel, zero padded. Weight is
    /// stored as shape (1,1,1,k).
    pub fn conv1d_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let k = self.value(w).numel();
        if xs[2] != 1 || xs[3] != 1 {
            return Err(Error::shape(
                "conv1d_channels",
                format!("expected (B,C,1,1) input, got {:?}", xs),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(
                "conv1d_channels",
                format!("kernel size {} must be odd", k),
            ));
        }
        let (bn, cn) = (xs[0], xs[1]);
        let half = k / 2;
        let xv = &self.vals[x.0];
        let wv = &self.vals[w.0];
        let mut data = vec![T::zero(); bn * cn];
        for bi in 0..bn {
            for c in 0..cn {
                let mut acc = T::zero();
                for j in 0..k {
                    let ci = c as isize + j as isize - half as isize;
                    if ci < 0 || ci >= cn as isize {
                        continue;
                    }
                    acc += xv.data[bi * cn + ci as usize] * wv.data[j];
                }
                data[bi * cn + c] = acc;
            }
        }
        let out = Tensor { shape: [bn, cn, 1, 1], data };
        Ok(self.push(
            out,
            Box::new(move |vals, gout, sink| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let mut gx = vec![T::zero(); bn * cn];
                let mut gw = vec![T::zero(); k];
                for bi in 0..bn {
                    for c in 0..cn {
                        let g = gout.data[bi * cn + c];
                        for j in 0..k {
                            let ci = c as isize + j as isize - half as isize;
                            if ci < 0 || ci >= cn as isize {
                                continue;
                            }
                            gx[bi * cn + ci as usize] += g * wv.data[j];
                            gw[j] += g * xv.data[bi * cn + ci as usize];
                        }
                    }
                }
                let sx = sink.slot(x.0, gx.len());
                for (a, v) in sx.iter_mut().zip(&gx) {
                    *a += *v;
                }
                let sw = sink.slot(w.0, k);
                for (a, v) in sw.iter_mut().zip(&gw) {
                    *a += *v;
                }
            }),
        ))
    }
}
