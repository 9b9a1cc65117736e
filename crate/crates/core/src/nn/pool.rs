use crate::autodiff::{Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PoolGeom};
use crate::tensor::Tensor;

fn pool<'t>(input: Var<'t>, kernel: usize, stride: usize, same: bool) -> Result<Var<'t>> {
    let x = input.value();
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::DimMismatch(format!("maxpool input must be NCHW, got {:?}", x.shape())));
    };
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool kernel and stride must be positive".into()));
    }
    let (out_h, out_w, pad_top, pad_left) = if same {
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let ph = ((oh - 1) * stride + kernel).saturating_sub(h);
        let pw = ((ow - 1) * stride + kernel).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        if kernel > h || kernel > w {
            return Err(Error::KernelTooLarge { kernel, extent: h.min(w) });
        }
        ((h - kernel) / stride + 1, (w - kernel) / stride + 1, 0, 0)
    };
    let geom = PoolGeom { batch: n, channels: c, height: h, width: w, kernel, stride, pad_top, pad_left, out_h, out_w };
    let (out, argmax) = kernels::maxpool_forward(&geom, x.data());
    let t = Tensor::new(&[n, c, out_h, out_w], out)?;
    Ok(input.tape().push(t, Op::MaxPool2d { input: input.id(), argmax }))
}

/// `out(i, j) = max_{p,q < k} in(i*s + p, j*s + q)` without padding.
///
/// The backward pass routes each output gradient to the first (row-major)
/// maximal input of its window.
pub fn maxpool2d<'t>(input: Var<'t>, kernel: usize, stride: usize) -> Result<Var<'t>> {
    pool(input, kernel, stride, false)
}

/// Max pool with output `ceil(H / stride)`; padded cells never win.
pub fn maxpool2d_same<'t>(input: Var<'t>, kernel: usize, stride: usize) -> Result<Var<'t>> {
    pool(input, kernel, stride, true)
}
