//! Central finite differences, used to cross-check the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerical gradient of the scalar function `f` at `x`.
///
/// Each element is `(f(x + h e_i) - f(x - h e_i)) / (x_i^+ - x_i^-)`, where the
/// denominator is the step actually realised in `f32`. `f` reports in `f64` so
/// that the final reduction does not add `f32` rounding to the difference.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        let fp = f(&probe)?;
        probe.data_mut()[i] = down;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(((fp - fm) / (up as f64 - down as f64)) as f32);
    }
    Tensor::new(x.shape(), grad)
}

/// `|a - b| / max(|a|, |b|, 1)`: relative for large magnitudes, absolute near zero.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest [`relative_error`] over two equally-shaped tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f32::max))
}

/// Settings for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f32,
    /// Coordinates probed per input; larger inputs are sampled.
    pub max_coords: usize,
    /// Seeds the loss weights and the coordinate sample.
    pub seed: u64,
    /// Largest disagreement between the step-`h` and step-`h/2` estimates
    /// before a coordinate is treated as sitting near a kink and skipped.
    pub kink_threshold: f32,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-2, max_coords: 24, seed: 0, kink_threshold: 1e-3 }
    }
}

/// Outcome of one [`check_gradients`] run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_error: f32,
    pub coords: usize,
    /// Coordinates left out because a ReLU or max-pool switch lies within
    /// the step. Not counted in `coords`.
    pub skipped: usize,
    /// `(input, flat index, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f32, f32)>,
}

/// Compare tape gradients of `sum(w * f(inputs))` against central
/// differences, with `w` drawn uniformly from `[-1, 1]`.
///
/// Each coordinate is also probed at half the step. For a smooth function
/// the two central estimates agree and the forward/backward gap halves with
/// the step. When either fails, a kink lies within the step, the central
/// difference there is not the derivative, and the coordinate is skipped.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: CheckOptions) -> Result<CheckReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&vars)?;
    let weights = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng)?;
    let loss = out.mul(tape.constant(weights.clone()))?.sum();
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&vars)?.value();
        Ok(out.data().iter().zip(weights.data()).map(|(&o, &w)| o as f64 * w as f64).sum())
    };

    let mut report = CheckReport { max_error: 0.0, coords: 0, skipped: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let base = eval(&probe)?;
    for (k, input) in inputs.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(vars[k]) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(input.shape())?;
                &zeros
            }
        };
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords { (0..n).collect() } else { sample(&mut rng, n, opts.max_coords).into_vec() };
        for i in coords {
            let orig = input.data()[i];
            let mut at = |h: f32| -> Result<(f64, f64, f64)> {
                let (up, down) = (orig + h, orig - h);
                probe[k].data_mut()[i] = up;
                let fp = eval(&probe)?;
                probe[k].data_mut()[i] = down;
                let fm = eval(&probe)?;
                probe[k].data_mut()[i] = orig;
                let (hu, hd) = (up as f64 - orig as f64, orig as f64 - down as f64);
                Ok(((fp - fm) / (hu + hd), (fp - base) / hu, (base - fm) / hd))
            };
            let (central, fwd, bwd) = at(opts.step)?;
            let (half, fwd2, bwd2) = at(opts.step / 2.0)?;
            let gap_drift = (fwd2 - bwd2) - (fwd - bwd) / 2.0;
            if relative_error(central as f32, half as f32) > opts.kink_threshold
                || relative_error(gap_drift as f32, 0.0) > opts.kink_threshold
            {
                report.skipped += 1;
                continue;
            }
            let numeric = central as f32;
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.coords += 1;
            if report.worst.is_none() || err > report.max_error {
                report.max_error = err;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::new(&[2, 2], vec![0.3, -1.2, 5.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| v as f64).sum()), &x, 1e-3).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn square_gives_twice_x() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| (v as f64) * (v as f64)).sum()), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-5, "{}", g.data()[0]);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-3).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn nonpositive_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn harness_accepts_a_correct_gradient() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], |v| v[0].mul(v[0]), CheckOptions::default()).unwrap();
        assert_eq!(r.coords, 3);
        assert!(r.max_error < 1e-3, "{r:?}");
    }

    #[test]
    fn kink_inside_the_step_is_skipped() {
        let x = Tensor::new(&[3], vec![0.004, -0.5, 0.7]).unwrap();
        let r = check_gradients(&[x], |v| Ok(v[0].relu()), CheckOptions::default()).unwrap();
        assert_eq!((r.coords, r.skipped), (2, 1), "{r:?}");
        assert!(r.max_error < 1e-6, "{r:?}");
    }
}
