use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// `max(x, 0)`; the gradient at exactly 0 is 0.
pub fn relu(input: Var<'_>) -> Var<'_> {
    input.relu()
}

/// Depth concatenation: channels of `x` first, then channels of `y`.
pub fn concat_depth<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    concat_channels(&[x, y])
}

/// Concatenate NCHW tensors along the channel axis, in order.
pub fn concat_channels<'t>(inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = inputs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let values: Vec<_> = inputs.iter().map(|v| v.value()).collect();
    let s0 = values[0].shape();
    if s0.len() != 4 {
        return Err(Error::DimMismatch(format!("concat needs NCHW, got {s0:?}")));
    }
    let (n, plane) = (s0[0], s0[2] * s0[3]);
    for v in &values {
        let s = v.shape();
        if s.len() != 4 || s[0] != n || s[2] != s0[2] || s[3] != s0[3] {
            return Err(Error::SpatialMismatch(format!("{s0:?} vs {s:?}")));
        }
    }
    let channels: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for (v, &c) in values.iter().zip(&channels) {
            data.extend_from_slice(&v.data()[s * c * plane..(s + 1) * c * plane]);
        }
    }
    let t = Tensor::new(&[n, total, s0[2], s0[3]], data)?;
    let op = Op::ConcatChannels { inputs: inputs.iter().map(|v| v.id()).collect(), channels };
    Ok(first.tape().push(t, op))
}

/// `input [N, D] x weight [D, U] + bias [U]`.
pub fn dense<'t>(input: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    input.matmul(weight)?.add_row_bias(bias)
}

/// `[N, ...] -> [N, prod(...)]`, row-major.
pub fn flatten(input: Var<'_>) -> Result<Var<'_>> {
    let s = input.shape();
    let rest: usize = s[1..].iter().product();
    input.reshape(&[s[0], rest.max(1)])
}

/// Inverse of [`flatten`] for a known per-sample shape.
pub fn unflatten<'t>(input: Var<'t>, sample_shape: &[usize]) -> Result<Var<'t>> {
    let mut shape = vec![input.shape()[0]];
    shape.extend_from_slice(sample_shape);
    input.reshape(&shape)
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: Var<'_>) -> Result<Var<'_>> {
    if logits.shape().len() != 2 {
        return Err(Error::DimMismatch(format!("softmax expects [N, K], got {:?}", logits.shape())));
    }
    Ok(logits.softmax())
}

/// Inverted dropout: zero each element with probability `rate` and scale
/// survivors by `1 / (1 - rate)`. Identity in infer mode or at rate 0.
pub fn dropout(input: Var<'_>, rate: f32, mode: Mode, seed: u64) -> Result<Var<'_>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..input.value().numel()).map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep }).collect();
    Ok(input.mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn relu_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 2.0, 0.0]).unwrap());
        assert_eq!(relu(x).value().data(), &[0.0, 2.0, 0.0]);
        let v = tape.var(Tensor::new(&[1], vec![0.0]).unwrap());
        let g = tape.backward(relu(v).sum()).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.0]);
    }

    #[test]
    fn concat_depth_layout() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 1.0).unwrap());
        let yv: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let y = tape.constant(Tensor::new(&[1, 3, 2, 2], yv.clone()).unwrap());
        let z = concat_depth(x, y).unwrap();
        assert_eq!(z.shape(), vec![1, 5, 2, 2]);
        // channel index depth(x) (0-based) is y's first channel
        assert_eq!(&z.value().data()[8..12], &yv[0..4]);
        let bad = tape.constant(Tensor::zeros(&[1, 1, 3, 2]).unwrap());
        assert!(matches!(concat_depth(x, bad), Err(Error::SpatialMismatch(_))));
    }

    #[test]
    fn dense_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![3.0]).unwrap());
        assert_eq!(dense(x, w, b).unwrap().value().data(), &[6.0]);
        let eye = tape.constant(Tensor::eye(2).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert_eq!(dense(x, eye, zero).unwrap().value().data(), &[1.0, 2.0]);
        let w3 = tape.constant(Tensor::zeros(&[3, 1]).unwrap());
        assert!(dense(x, w3, b).is_err());
    }

    #[test]
    fn flatten_row_major() {
        let tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 2, 2], data).unwrap());
        let f = flatten(x).unwrap();
        assert_eq!(f.shape(), vec![2, 12]);
        let xv = x.value();
        let fv = f.value();
        for (c, h, w) in [(0, 0, 0), (1, 1, 0), (2, 0, 1), (2, 1, 1)] {
            assert_eq!(fv.get(&[1, c * 4 + h * 2 + w]), xv.get(&[1, c, h, w]));
        }
        assert_eq!(*unflatten(f, &[3, 2, 2]).unwrap().value(), *xv);
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]).unwrap());
        assert_eq!(softmax(z).unwrap().value().data(), &[0.25; 4]);

        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = softmax(tape.constant(x.clone())).unwrap().value();
        let denom: f64 = (1..=4).map(|i| (i as f64).exp()).sum();
        for i in 0..4 {
            let expect = ((i + 1) as f64).exp() / denom;
            assert!((p.data()[i] as f64 - expect).abs() < 1e-6);
        }
        let shifted = softmax(tape.constant(x.map(|v| v + 100.0))).unwrap().value();
        assert!(shifted.max_abs_diff(&p).unwrap() < 1e-6);
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10], 2.0).unwrap());
        assert_eq!(dropout(x, 0.0, Mode::Train, 1).unwrap().value().data(), &[2.0; 10]);
        assert_eq!(dropout(x, 0.9, Mode::Infer, 1).unwrap().value().data(), &[2.0; 10]);
        assert!(dropout(x, 1.0, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let tape = Tape::new();
        let n = 100_000usize;
        let x = tape.constant(Tensor::full(&[n], 1.0).unwrap());
        let y = dropout(x, 0.5, Mode::Train, 42).unwrap().value();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((kept - n as f64 * 0.5).abs() < 3.0 * sigma, "kept {kept}");
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        let again = dropout(x, 0.5, Mode::Train, 42).unwrap().value();
        assert_eq!(*again, *y);
    }
}
