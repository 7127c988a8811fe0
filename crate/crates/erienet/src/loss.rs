//! Training losses and evaluation metrics.
//!
//! The total training loss is L1 + lambda_wssim * L_wssim + lambda_wmse *
//! L_wmse, with a multi-frequency SSIM term over all 12 subbands of a
//! 3-level Haar pyramid and an MSE term over the pixel domain plus each
//! pyramid level. All terms are built from tape ops, so they are fully
//! differentiable.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const PYRAMID_LEVELS: usize = 3;
pub const BANDS_PER_LEVEL: usize = 4;
pub const SSIM_TERMS: usize = PYRAMID_LEVELS * BANDS_PER_LEVEL;

#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_wssim: f64,
    pub lambda_wmse: f64,
    /// Per-subband SSIM ratios, level-major in band order LL, HL, LH, HH.
    /// Must sum to 1 so identical images score exactly -1.
    pub ratios: [f64; SSIM_TERMS],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_wssim: 0.5,
            lambda_wmse: 0.5,
            ratios: [1.0 / SSIM_TERMS as f64; SSIM_TERMS],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_wssim < 0.0 || self.lambda_wmse < 0.0 {
            return Err(Error::invalid("loss_weights", "lambdas must be nonnegative"));
        }
        let s: f64 = self.ratios.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "loss_weights",
                format!("SSIM ratios sum to {}, expected 1", s),
            ));
        }
        Ok(())
    }
}

fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; k * k];
    let mut sum = 0.0;
    for y in 0..k {
        for x in 0..k {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            w[y * k + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn same_shape<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    a: Var,
    b: Var,
) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
    }
    Ok(())
}

/// Differentiable SSIM with the Wang et al. constants C1=(0.01 L)^2,
/// C2=(0.03 L)^2, an 11x11 Gaussian window (sigma 1.5), valid padding and
/// the mean taken over all window positions, channels and batch.
///
/// When the input is smaller than 11 pixels on a side (wavelet subbands),
/// the window shrinks to the largest odd size that fits and sigma scales
/// proportionally (1.5 * side / 11).
pub fn ssim_op<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, l: f64) -> Result<Var> {
    same_shape("ssim", tape, x, y)?;
    let [_, cn, h, w] = tape.shape(x);
    let mut k = 11usize.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let sigma = 1.5 * k as f64 / 11.0;
    let win1 = gaussian_window(k, sigma);
    // Same window replicated per channel for a depthwise convolution.
    let mut wdat = Vec::with_capacity(cn * k * k);
    for _ in 0..cn {
        wdat.extend_from_slice(&win1);
    }
    let win = tape.constant(Tensor::from_f64s([cn, 1, k, k], &wdat)?);

    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);

    let mu_x = tape.depthwise_conv2d(x, win, None, 1, 0)?;
    let mu_y = tape.depthwise_conv2d(y, win, None, 1, 0)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.depthwise_conv2d(xx, win, None, 1, 0)?;
    let e_yy = tape.depthwise_conv2d(yy, win, None, 1, 0)?;
    let e_xy = tape.depthwise_conv2d(xy, win, None, 1, 0)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let two_mu = tape.mul_const(mu_xy, 2.0);
    let num1 = tape.add_const(two_mu, c1);
    let two_cov = tape.mul_const(cov, 2.0);
    let num2 = tape.add_const(two_cov, c2);
    let num = tape.mul(num1, num2)?;
    let mu_sum = tape.add(mu_xx, mu_yy)?;
    let den1 = tape.add_const(mu_sum, c1);
    let var_sum = tape.add(var_x, var_y)?;
    let den2 = tape.add_const(var_sum, c2);
    let den = tape.mul(den1, den2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean_all(map))
}

/// SSIM as a plain metric between two tensors.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, l: f64) -> Result<f64> {
    let mut tape = Tape::<T>::no_grad();
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y.clone(), false);
    let s = ssim_op(&mut tape, xv, yv, l)?;
    Ok(tape.value(s).scalar_value().to_f64())
}

/// 10 * log10(max_val^2 / MSE); +infinity for identical inputs.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    if x.shape != y.shape {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", x.shape, y.shape)));
    }
    let n = x.numel() as f64;
    let mse: f64 = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// The 12 pyramid subbands of `x`, level-major in order LL, HL, LH, HH.
/// Each entry has the channel count of `x`.
fn pyramid_bands<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
    let cn = tape.shape(x)[1];
    let mut bands = Vec::with_capacity(SSIM_TERMS);
    let mut cur = x;
    for _ in 0..PYRAMID_LEVELS {
        let stacked = tape.haar_dwt2d(cur)?;
        for band in 0..BANDS_PER_LEVEL {
            bands.push(tape.slice_channels(stacked, band * cn, cn)?);
        }
        cur = bands[bands.len() - BANDS_PER_LEVEL]; // LL of this level
    }
    Ok(bands)
}

fn check_pyramid_dims<T: Scalar>(op: &'static str, tape: &Tape<T>, x: Var) -> Result<()> {
    let [_, _, h, w] = tape.shape(x);
    let div = 1 << PYRAMID_LEVELS;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(
            op,
            format!("spatial dims {}x{} not divisible by {}", h, w, div),
        ));
    }
    Ok(())
}

/// Multi-frequency SSIM loss: -sum_i r_i * SSIM(out_band_i, gt_band_i).
/// Dynamic range per band adapts to the ground-truth band, floored at 1,
/// since detail coefficients are signed.
pub fn wavelet_ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    gt: Var,
    weights: &LossWeights,
) -> Result<Var> {
    same_shape("wavelet_ssim_loss", tape, out, gt)?;
    check_pyramid_dims("wavelet_ssim_loss", tape, out)?;
    weights.validate()?;
    let out_bands = pyramid_bands(tape, out)?;
    let gt_bands = pyramid_bands(tape, gt)?;
    let mut acc: Option<Var> = None;
    for (i, (&ob, &gb)) in out_bands.iter().zip(&gt_bands).enumerate() {
        let l = tape.value(gb).max_abs().max(1.0);
        let s = ssim_op(tape, ob, gb, l)?;
        let term = tape.mul_const(s, weights.ratios[i]);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.neg(acc.expect("SSIM_TERMS > 0")))
}

fn mse_term<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Pixel-domain MSE plus, per pyramid level, the element-averaged MSE over
/// the stacked 4-band coefficient tensor of that level.
pub fn wavelet_mse_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, gt: Var) -> Result<Var> {
    same_shape("wavelet_mse_loss", tape, out, gt)?;
    check_pyramid_dims("wavelet_mse_loss", tape, out)?;
    let cn = tape.shape(out)[1];
    let mut total = mse_term(tape, out, gt)?;
    let mut cur_out = out;
    let mut cur_gt = gt;
    for _ in 0..PYRAMID_LEVELS {
        let so = tape.haar_dwt2d(cur_out)?;
        let sg = tape.haar_dwt2d(cur_gt)?;
        let level = mse_term(tape, so, sg)?;
        total = tape.add(total, level)?;
        cur_out = tape.slice_channels(so, 0, cn)?;
        cur_gt = tape.slice_channels(sg, 0, cn)?;
    }
    Ok(total)
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, gt: Var) -> Result<Var> {
    same_shape("l1_loss", tape, out, gt)?;
    let d = tape.sub(out, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// L1 + lambda_wssim * L_wssim + lambda_wmse * L_wmse.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    gt: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let l1 = l1_loss(tape, out, gt)?;
    let wssim = wavelet_ssim_loss(tape, out, gt, weights)?;
    let wmse = wavelet_mse_loss(tape, out, gt)?;
    let a = tape.mul_const(wssim, weights.lambda_wssim);
    let b = tape.mul_const(wmse, weights.lambda_wmse);
    let ab = tape.add(a, b)?;
    tape.add(l1, ab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck;

    fn rand_img(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::uniform(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = rand_img([1, 3, 16, 16], 1);
        let s = ssim(&x, &x, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{}", s);
    }

    #[test]
    fn ssim_symmetric() {
        let x = rand_img([1, 1, 16, 16], 2);
        let y = rand_img([1, 1, 16, 16], 3);
        let a = ssim(&x, &y, 1.0).unwrap();
        let b = ssim(&y, &x, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Contrast/structure terms collapse to 1 on constants.
        let (c1v, c2v) = (0.3, 0.7);
        let x = Tensor::<f64>::full([1, 1, 16, 16], c1v);
        let y = Tensor::<f64>::full([1, 1, 16, 16], c2v);
        let l = 1.0f64;
        let c1 = (0.01 * l).powi(2);
        let expected = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        let s = ssim(&x, &y, l).unwrap();
        assert!((s - expected).abs() < 1e-9, "{} vs {}", s, expected);
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let x = Tensor::<f64>::zeros([1, 1, 16, 16]);
        let y = Tensor::<f64>::zeros([1, 1, 8, 8]);
        assert!(ssim(&x, &y, 1.0).is_err());
    }

    #[test]
    fn psnr_uniform_error() {
        let x = Tensor::<f64>::full([1, 3, 8, 8], 0.5);
        let y = x.map(|v| v + 1.0 / 255.0);
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!((p - 20.0 * 255.0f64.log10()).abs() < 1e-3, "{}", p);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let x = rand_img([1, 3, 8, 8], 4);
        assert!(psnr(&x, &x, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_halved_mse_gains_3db() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let e1 = Tensor::<f64>::full([1, 1, 4, 4], 0.1);
        let e2 = Tensor::<f64>::full([1, 1, 4, 4], 0.1 / 2.0f64.sqrt());
        let p1 = psnr(&x, &e1, 1.0).unwrap();
        let p2 = psnr(&x, &e2, 1.0).unwrap();
        assert!((p2 - p1 - 10.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn wssim_identical_images_is_minus_one() {
        let x = rand_img([1, 3, 16, 16], 5);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x.clone(), false);
        let b = tape.leaf(x, false);
        let l = wavelet_ssim_loss(&mut tape, a, b, &LossWeights::default()).unwrap();
        assert!((tape.value(l).scalar_value() + 1.0).abs() < 1e-5);
    }

    #[test]
    fn wssim_bounded() {
        let x = rand_img([1, 1, 16, 16], 6);
        let y = rand_img([1, 1, 16, 16], 7);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x, false);
        let b = tape.leaf(y, false);
        let l = wavelet_ssim_loss(&mut tape, a, b, &LossWeights::default()).unwrap();
        let v = tape.value(l).scalar_value();
        assert!((-1.0..=1.0).contains(&v), "{}", v);
    }

    #[test]
    fn wmse_identical_zero_and_positive_otherwise() {
        let x = rand_img([1, 3, 16, 16], 8);
        let y = rand_img([1, 3, 16, 16], 9);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x.clone(), false);
        let b = tape.leaf(x, false);
        let c = tape.leaf(y, false);
        let zero = wavelet_mse_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(zero).scalar_value(), 0.0);
        let pos = wavelet_mse_loss(&mut tape, a, c).unwrap();
        assert!(tape.value(pos).scalar_value() > 0.0);
    }

    #[test]
    fn wmse_constant_closed_form() {
        // c vs 0: pixel MSE = c^2; level-t LL = 2^t c over a quarter of the
        // stacked elements, so level t contributes 4^(t-1) c^2. Total 22 c^2.
        let c = 0.3;
        let x = Tensor::<f64>::full([1, 1, 16, 16], c);
        let z = Tensor::<f64>::zeros([1, 1, 16, 16]);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x, false);
        let b = tape.leaf(z, false);
        let l = wavelet_mse_loss(&mut tape, a, b).unwrap();
        let expected = 22.0 * c * c;
        assert!((tape.value(l).scalar_value() - expected).abs() < 1e-9);
    }

    #[test]
    fn total_loss_identical_images_is_minus_half() {
        let x = rand_img([1, 3, 16, 16], 10);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x.clone(), false);
        let b = tape.leaf(x, false);
        let l = total_loss(&mut tape, a, b, &LossWeights::default()).unwrap();
        assert!((tape.value(l).scalar_value() + 0.5).abs() < 1e-5);
    }

    #[test]
    fn total_loss_lambda_zero_is_l1() {
        let x = rand_img([1, 1, 16, 16], 11);
        let y = rand_img([1, 1, 16, 16], 12);
        let w = LossWeights { lambda_wssim: 0.0, lambda_wmse: 0.0, ..Default::default() };
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x.clone(), false);
        let b = tape.leaf(y.clone(), false);
        let tot = total_loss(&mut tape, a, b, &w).unwrap();
        let l1: f64 = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / x.numel() as f64;
        assert!((tape.value(tot).scalar_value() - l1).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Gradient w.r.t. the network output; the target enters as data
        // (its band maxima set the SSIM dynamic ranges, which are not
        // differentiated through).
        let x = rand_img([1, 1, 16, 16], 13);
        let y = rand_img([1, 1, 16, 16], 14);
        let w = LossWeights::default();
        let r = gradcheck(
            |tape, vs| {
                let gt = tape.constant(y.clone());
                total_loss(tape, vs[0], gt, &w)
            },
            &[x],
            1e-4,
            60,
            15,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{:?}", r);
    }

    #[test]
    fn total_loss_monotone_toward_target() {
        let x = rand_img([1, 1, 16, 16], 16);
        let y = rand_img([1, 1, 16, 16], 17);
        let w = LossWeights::default();
        let mut prev = f64::INFINITY;
        for step in 0..5 {
            let t = step as f64 / 4.0;
            let interp = Tensor::<f64>::new(
                x.shape,
                x.data.iter().zip(&y.data).map(|(a, b)| a + t * (b - a)).collect(),
            )
            .unwrap();
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(interp, false);
            let b = tape.leaf(y.clone(), false);
            let l = total_loss(&mut tape, a, b, &w).unwrap();
            let v = tape.value(l).scalar_value();
            assert!(v < prev, "step {}: {} !< {}", step, v, prev);
            prev = v;
        }
    }
}
