//! Orthonormal 2-D Haar wavelet decomposition.
//!
//! Per 2x2 block [[a,b],[c,d]]:
//!   LL = (a+b+c+d)/2, HL = (a-b+c-d)/2, LH = (a+b-c-d)/2, HH = (a-b-c+d)/2.
//! The transform matrix is orthogonal, so reconstruction is exact and
//! energy (sum of squares) is conserved across levels.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One decomposition level: approximation plus three detail bands.
#[derive(Clone, Debug)]
pub struct Bands<T> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
}

/// Recursive decomposition of the LL band; `levels[t]` has spatial size
/// (H / 2^(t+1), W / 2^(t+1)).
#[derive(Clone, Debug)]
pub struct WaveletPyramid<T> {
    pub levels: Vec<Bands<T>>,
}

pub fn haar_dwt2d<T: Scalar>(x: &Tensor<T>) -> Result<Bands<T>> {
    let [bn, cn, h, w] = x.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "haar_dwt2d",
            format!("spatial dims {}x{} must be even", h, w),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::from_f64(0.5);
    let shape = [bn, cn, oh, ow];
    let mut ll = Tensor::zeros(shape);
    let mut hl = Tensor::zeros(shape);
    let mut lh = Tensor::zeros(shape);
    let mut hh = Tensor::zeros(shape);
    for bc in 0..bn * cn {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = bc * h * w;
                let a = x.data[base + 2 * oy * w + 2 * ox];
                let b = x.data[base + 2 * oy * w + 2 * ox + 1];
                let c = x.data[base + (2 * oy + 1) * w + 2 * ox];
                let d = x.data[base + (2 * oy + 1) * w + 2 * ox + 1];
                let o = (bc * oh + oy) * ow + ox;
                ll.data[o] = (a + b + c + d) * half;
                hl.data[o] = (a - b + c - d) * half;
                lh.data[o] = (a + b - c - d) * half;
                hh.data[o] = (a - b - c + d) * half;
            }
        }
    }
    Ok(Bands { ll, hl, lh, hh })
}

/// Exact linear inverse of [`haar_dwt2d`].
pub fn haar_idwt2d<T: Scalar>(bands: &Bands<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape;
    for (name, b) in [("HL", &bands.hl), ("LH", &bands.lh), ("HH", &bands.hh)] {
        if b.shape != shape {
            return Err(Error::shape(
                "haar_idwt2d",
                format!("band {} shape {:?} != LL shape {:?}", name, b.shape, shape),
            ));
        }
    }
    let [bn, cn, oh, ow] = shape;
    let (h, w) = (2 * oh, 2 * ow);
    let half = T::from_f64(0.5);
    let mut out = Tensor::zeros([bn, cn, h, w]);
    for bc in 0..bn * cn {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (bc * oh + oy) * ow + ox;
                let (ll, hl, lh, hh) =
                    (bands.ll.data[o], bands.hl.data[o], bands.lh.data[o], bands.hh.data[o]);
                let base = bc * h * w;
                out.data[base + 2 * oy * w + 2 * ox] = (ll + hl + lh + hh) * half;
                out.data[base + 2 * oy * w + 2 * ox + 1] = (ll - hl + lh - hh) * half;
                out.data[base + (2 * oy + 1) * w + 2 * ox] = (ll + hl - lh - hh) * half;
                out.data[base + (2 * oy + 1) * w + 2 * ox + 1] = (ll - hl - lh + hh) * half;
            }
        }
    }
    Ok(out)
}

pub fn dwt_pyramid<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<WaveletPyramid<T>> {
    let [_, _, h, w] = x.shape;
    let div = 1 << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(
            "dwt_pyramid",
            format!("spatial dims {}x{} not divisible by 2^{}", h, w, levels),
        ));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let bands = haar_dwt2d(&cur)?;
        cur = bands.ll.clone();
        out.push(bands);
    }
    Ok(WaveletPyramid { levels: out })
}

/// Reconstructs the input from a pyramid (inverse of [`dwt_pyramid`]).
pub fn idwt_pyramid<T: Scalar>(p: &WaveletPyramid<T>) -> Result<Tensor<T>> {
    let mut levels = p.levels.iter().rev();
    let deepest = levels
        .next()
        .ok_or_else(|| Error::invalid("idwt_pyramid", "empty pyramid"))?;
    let mut cur = haar_idwt2d(deepest)?;
    for bands in levels {
        let patched = Bands {
            ll: cur,
            hl: bands.hl.clone(),
            lh: bands.lh.clone(),
            hh: bands.hh.clone(),
        };
        cur = haar_idwt2d(&patched)?;
    }
    Ok(cur)
}

fn sum_sq<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data.iter().map(|&v| v.to_f64() * v.to_f64()).sum()
}

/// Total energy of the pyramid representation: deepest LL plus every
/// detail band. Equals the input energy (Parseval) up to rounding.
pub fn pyramid_energy<T: Scalar>(p: &WaveletPyramid<T>) -> f64 {
    let mut e = 0.0;
    for (i, b) in p.levels.iter().enumerate() {
        e += sum_sq(&b.hl) + sum_sq(&b.lh) + sum_sq(&b.hh);
        if i + 1 == p.levels.len() {
            e += sum_sq(&b.ll);
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn block_values() {
        let x = Tensor::<f64>::from_f64s([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = haar_dwt2d(&x).unwrap();
        assert_eq!(b.ll.data[0], 5.0);
        assert_eq!(b.hl.data[0], -1.0);
        assert_eq!(b.lh.data[0], -2.0);
        assert_eq!(b.hh.data[0], 0.0);
    }

    #[test]
    fn roundtrip_random_64x64() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::uniform([1, 1, 64, 64], -1.0, 1.0, &mut rng);
        let b = haar_dwt2d(&x).unwrap();
        let y = haar_idwt2d(&b).unwrap();
        for (a, r) in x.data.iter().zip(&y.data) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_shapes_and_constant_ll() {
        let x = Tensor::<f64>::full([1, 1, 64, 64], 0.5);
        let p = dwt_pyramid(&x, 3).unwrap();
        assert_eq!(p.levels[0].ll.shape, [1, 1, 32, 32]);
        assert_eq!(p.levels[1].ll.shape, [1, 1, 16, 16]);
        assert_eq!(p.levels[2].ll.shape, [1, 1, 8, 8]);
        // Constant c compounds 2c per level: level-3 LL = 8c.
        for &v in &p.levels[2].ll.data {
            assert!((v - 4.0).abs() < 1e-12);
        }
        for b in &p.levels {
            for band in [&b.hl, &b.lh, &b.hh] {
                assert!(band.data.iter().all(|&v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn parseval_and_pyramid_roundtrip() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f64>::uniform([1, 3, 64, 64], -2.0, 2.0, &mut rng);
        let p = dwt_pyramid(&x, 3).unwrap();
        let ex = sum_sq(&x);
        let ep = pyramid_energy(&p);
        assert!((ex - ep).abs() / ex < 1e-12);
        let y = idwt_pyramid(&p).unwrap();
        for (a, r) in x.data.iter().zip(&y.data) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 3, 4]);
        assert!(haar_dwt2d(&x).is_err());
        let y = Tensor::<f64>::zeros([1, 1, 4, 4]);
        assert!(dwt_pyramid(&y, 3).is_err());
    }

    #[test]
    fn linearity() {
        let mut rng = Rng::new(30);
        let x = Tensor::<f64>::uniform([1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform([1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let (a, b) = (2.5, -1.25);
        let mut combo = Tensor::<f64>::zeros([1, 1, 8, 8]);
        for i in 0..64 {
            combo.data[i] = a * x.data[i] + b * y.data[i];
        }
        let bx = haar_dwt2d(&x).unwrap();
        let by = haar_dwt2d(&y).unwrap();
        let bc = haar_dwt2d(&combo).unwrap();
        let triples = [
            (&bc.ll, &bx.ll, &by.ll),
            (&bc.hl, &bx.hl, &by.hl),
            (&bc.lh, &bx.lh, &by.lh),
            (&bc.hh, &bx.hh, &by.hh),
        ];
        for (cb, xb, yb) in triples {
            for i in 0..cb.data.len() {
                assert!((cb.data[i] - (a * xb.data[i] + b * yb.data[i])).abs() < 1e-10);
            }
        }
    }
}
