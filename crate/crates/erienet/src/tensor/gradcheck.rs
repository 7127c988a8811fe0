//! Central-difference gradient checking. Runs in f64 only; 32-bit central
//! differences are not trustworthy at the tolerances we assert.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst_index: (usize, usize),
    pub coords_checked: usize,
}

/// Checks analytic gradients of a scalar-valued tensor function against
/// central differences (f(x+h) - f(x-h)) / 2h.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). When an
/// input has more elements than `max_coords_per_input`, a deterministic
/// random subset is checked.
pub fn gradcheck<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords_per_input: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).scalar_value())
    };

    let mut rng = Rng::new(seed);
    let mut report =
        GradReport { max_rel_err: 0.0, worst_index: (0, 0), coords_checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords_per_input {
            (0..n).collect()
        } else {
            (0..max_coords_per_input).map(|_| rng.below(n)).collect()
        };
        let analytic = grads.get(vars[ii]);
        for ci in coords {
            let orig = input.data[ci];
            work[ii].data[ci] = orig + h;
            let fp = eval(&work)?;
            work[ii].data[ci] = orig - h;
            let fm = eval(&work)?;
            work[ii].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data[ci]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = (ii, ci);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_f64s([1, 1, 2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = gradcheck(
            |tape, vs| {
                let y = tape.mul_const(vs[0], 3.0);
                Ok(tape.sum_all(y))
            },
            &[x],
            1e-4,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{:?}", r);
    }

    #[test]
    fn relu_away_from_zero_passes() {
        // Inputs pre-perturbed away from the kink by +0.1.
        let x = Tensor::<f64>::from_f64s([1, 1, 1, 4], &[0.6, -1.4, 2.1, -0.9]).unwrap();
        let r = gradcheck(
            |tape, vs| {
                let y = tape.relu(vs[0]);
                Ok(tape.sum_all(y))
            },
            &[x],
            1e-4,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{:?}", r);
    }

    #[test]
    fn sigmoid_chain_depth_three() {
        let x = Tensor::<f64>::from_f64s([1, 1, 1, 3], &[0.3, -0.8, 1.2]).unwrap();
        let r = gradcheck(
            |tape, vs| {
                let a = tape.sigmoid(vs[0]);
                let b = tape.sigmoid(a);
                let c = tape.sigmoid(b);
                Ok(tape.sum_all(c))
            },
            &[x],
            1e-4,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let x = Tensor::<f64>::scalar(0.0);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone(), true);
        let y = tape.sigmoid(v);
        let g = tape.backward(y).unwrap();
        assert!((g.get(v).unwrap().data[0] - 0.25).abs() < 1e-12);
        let r = gradcheck(
            |tape, vs| {
                let s = tape.sigmoid(vs[0]);
                Ok(tape.sum_all(s))
            },
            &[x],
            1e-4,
            10,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn conv_weight_gradient_matches() {
        let mut rng = crate::rng::Rng::new(17);
        let x = Tensor::<f64>::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b = Tensor::<f64>::uniform([1, 3, 1, 1], -0.1, 0.1, &mut rng);
        let r = gradcheck(
            |tape, vs| {
                let y = tape.conv2d(vs[0], vs[1], Some(vs[2]), 1, 1)?;
                Ok(tape.sum_all(y))
            },
            &[x, w, b],
            1e-4,
            200,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }
}
