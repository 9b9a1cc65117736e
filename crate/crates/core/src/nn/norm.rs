use crate::autodiff::{Op, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Batch normalization parameters. Running statistics are carried alongside
/// the trainable `gamma`/`beta` but never receive gradients.
#[derive(Clone, Debug)]
pub struct BatchNorm<P> {
    pub gamma: P,
    pub beta: P,
    pub running_mean: P,
    pub running_var: P,
    pub eps: f32,
    pub momentum: f32,
}

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

impl<P> BatchNorm<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> BatchNorm<Q> {
        BatchNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            running_mean: f(&self.running_mean),
            running_var: f(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// Per-channel mean and biased variance of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchStats {
    /// `r <- (1 - momentum) * r + momentum * batch`.
    pub fn apply(&self, running_mean: &mut Tensor, running_var: &mut Tensor, momentum: f32) {
        for (r, b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
///
/// Train mode normalizes with the batch statistics (returned so the caller
/// can update the running averages); infer mode uses the running statistics.
pub fn batchnorm<'t>(input: Var<'t>, p: &BatchNorm<Var<'t>>, mode: Mode) -> Result<(Var<'t>, Option<BatchStats>)> {
    let x = input.value();
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::DimMismatch(format!("batchnorm needs [N, C, ..], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let (gamma, beta) = (p.gamma.value(), p.beta.value());
    for t in [&gamma, &beta, &p.running_mean.value(), &p.running_var.value()] {
        if t.shape() != [c] {
            return Err(Error::ChannelMismatch { expected: t.numel(), actual: c });
        }
    }
    let count = n * plane;
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::BatchTooSmall(count));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * plane;
                    mean[ch] += x.data()[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * plane;
                    var[ch] += x.data()[start..start + plane].iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let mean: Vec<f32> = mean.into_iter().map(|v| v as f32).collect();
            let var: Vec<f32> = var.into_iter().map(|v| v as f32).collect();
            let stats = BatchStats { mean: mean.clone(), var: var.clone() };
            (mean, var, Some(stats))
        }
        Mode::Infer => (p.running_mean.value().data().to_vec(), p.running_var.value().data().to_vec(), None),
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x.data()[r]) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = gamma.data()[ch] * *xh + beta.data()[ch];
            }
        }
    }
    let t = Tensor::new(shape, out)?;
    let op = Op::BatchNorm {
        input: input.id(),
        gamma: p.gamma.id(),
        beta: p.beta.id(),
        xhat,
        inv_std,
        batch_stats: mode == Mode::Train,
    };
    Ok((input.tape().push(t, op), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn params<'t>(tape: &'t Tape, c: usize, gamma: f32, beta: f32) -> BatchNorm<Var<'t>> {
        BatchNorm {
            gamma: tape.var(Tensor::full(&[c], gamma).unwrap()),
            beta: tape.var(Tensor::full(&[c], beta).unwrap()),
            running_mean: tape.constant(Tensor::zeros(&[c]).unwrap()),
            running_var: tape.constant(Tensor::full(&[c], 1.0).unwrap()),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    #[test]
    fn equal_inputs_normalize_to_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 4.5).unwrap());
        let (y, _) = batchnorm(x, &params(&tape, 2, 1.0, 0.0), Mode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_value_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
        let (y, stats) = batchnorm(x, &params(&tape, 1, 1.0, 0.0), Mode::Train).unwrap();
        let y = y.value();
        assert!((y.data()[0] + 1.0).abs() < 1e-3 && (y.data()[1] - 1.0).abs() < 1e-3, "{:?}", y.data());
        let stats = stats.unwrap();
        assert_eq!((stats.mean[0], stats.var[0]), (1.0, 1.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, -3.0, 8.0, 0.5]).unwrap());
        let (y, _) = batchnorm(x, &params(&tape, 1, 0.0, 5.0), Mode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn single_value_batch_rejected_in_train_mode() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]).unwrap());
        assert!(matches!(batchnorm(x, &params(&tape, 1, 1.0, 0.0), Mode::Train), Err(Error::BatchTooSmall(1))));
        assert!(batchnorm(x, &params(&tape, 1, 1.0, 0.0), Mode::Infer).is_ok());
    }

    #[test]
    fn running_update_uses_momentum() {
        let stats = BatchStats { mean: vec![2.0], var: vec![3.0] };
        let mut rm = Tensor::zeros(&[1]).unwrap();
        let mut rv = Tensor::full(&[1], 1.0).unwrap();
        stats.apply(&mut rm, &mut rv, 0.1);
        assert!((rm.data()[0] - 0.2).abs() < 1e-7);
        assert!((rv.data()[0] - 1.2).abs() < 1e-7);
    }
}
