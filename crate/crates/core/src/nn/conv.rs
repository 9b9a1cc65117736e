use crate::autodiff::{Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding so that the output is `ceil(H / stride)`; odd totals put
    /// the extra row/column at the bottom/right.
    Same,
}

/// Convolution parameters, generic over how the tensors are held.
///
/// `weight` is `[out_ch, in_ch / groups, kh, kw]`; `bias` is `[out_ch]`.
#[derive(Clone, Debug)]
pub struct Conv2d<P> {
    pub weight: P,
    pub bias: Option<P>,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
}

impl<P> Conv2d<P> {
    pub fn new(weight: P, bias: Option<P>, stride: usize, padding: Padding) -> Self {
        Self { weight, bias, stride, padding, dilation: 1, groups: 1 }
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Conv2d<Q> {
        Conv2d {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(f),
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }
}

/// Output extent and leading pad along one spatial axis.
fn axis(extent: usize, kernel: usize, stride: usize, dilation: usize, padding: Padding) -> Result<(usize, usize)> {
    let eff = dilation * (kernel - 1) + 1;
    match padding {
        Padding::Valid => {
            if eff > extent {
                return Err(Error::KernelTooLarge { kernel: eff, extent });
            }
            Ok(((extent - eff) / stride + 1, 0))
        }
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + eff).saturating_sub(extent);
            Ok((out, total / 2))
        }
    }
}

/// Resolve the geometry of a convolution of `input_shape` (NCHW) with a
/// weight of `weight_shape`.
pub fn conv_geometry(
    input_shape: &[usize],
    weight_shape: &[usize],
    stride: usize,
    padding: Padding,
    dilation: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::DimMismatch(format!("conv input must be NCHW, got {input_shape:?}")));
    };
    let &[o, cg, kh, kw] = weight_shape else {
        return Err(Error::DimMismatch(format!("conv weight must be rank 4, got {weight_shape:?}")));
    };
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::InvalidArgument("stride, dilation and groups must be positive".into()));
    }
    if cg * groups != c {
        return Err(Error::ChannelMismatch { expected: cg * groups, actual: c });
    }
    if o % groups != 0 {
        return Err(Error::InvalidArgument(format!("{o} output channels not divisible into {groups} groups")));
    }
    let (out_h, pad_top) = axis(h, kh, stride, dilation, padding)?;
    let (out_w, pad_left) = axis(w, kw, stride, dilation, padding)?;
    Ok(ConvGeom {
        batch: n,
        in_ch: c,
        height: h,
        width: w,
        out_ch: o,
        groups,
        kh,
        kw,
        stride,
        dilation,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

/// Cross-correlation: `out(i, j) = sum_{m,n} in(i*s + m, j*s + n) * w(m, n) + b`.
pub fn conv2d<'t>(input: Var<'t>, p: &Conv2d<Var<'t>>) -> Result<Var<'t>> {
    let x = input.value();
    let w = p.weight.value();
    let geom = conv_geometry(x.shape(), w.shape(), p.stride, p.padding, p.dilation, p.groups)?;
    let bias = p.bias.map(|b| b.value());
    if let Some(b) = &bias {
        if b.shape() != [geom.out_ch] {
            return Err(Error::DimMismatch(format!("bias {:?} for {} output channels", b.shape(), geom.out_ch)));
        }
    }
    let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bias.as_deref().map(|b| b.data()));
    let t = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
    Ok(input.tape().push(t, Op::Conv2d { input: input.id(), weight: p.weight.id(), bias: p.bias.map(|b| b.id()), geom }))
}

/// Depthwise (`[C, 1, kh, kw]`, same padding, stride 1) then pointwise
/// (`[out, C, 1, 1]`) convolution.
#[derive(Clone, Debug)]
pub struct SeparableConv2d<P> {
    pub depthwise: P,
    pub pointwise: P,
    pub bias: P,
}

impl<P> SeparableConv2d<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SeparableConv2d<Q> {
        SeparableConv2d { depthwise: f(&self.depthwise), pointwise: f(&self.pointwise), bias: f(&self.bias) }
    }
}

pub fn separable_conv2d<'t>(input: Var<'t>, p: &SeparableConv2d<Var<'t>>) -> Result<Var<'t>> {
    let c = input.shape().get(1).copied().unwrap_or(0);
    let dw_shape = p.depthwise.shape();
    if dw_shape.len() != 4 || dw_shape[0] != c || dw_shape[1] != 1 {
        return Err(Error::ChannelMismatch { expected: dw_shape.first().copied().unwrap_or(0), actual: c });
    }
    let depthwise = Conv2d { weight: p.depthwise, bias: None, stride: 1, padding: Padding::Same, dilation: 1, groups: c };
    let mid = conv2d(input, &depthwise)?;
    conv2d(mid, &Conv2d::new(p.pointwise, Some(p.bias), 1, Padding::Valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn conv_simple(x: Tensor, w: Tensor, b: Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Conv2d::new(tape.constant(w), Some(tape.constant(b)), stride, padding);
        Ok((*conv2d(tape.constant(x), &p)?.value()).clone())
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = conv_simple(x.clone(), Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_convolution() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv_simple(x, Tensor::full(&[1, 1, 2, 2], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn bias_only() {
        let x = Tensor::full(&[2, 3, 4, 4], 0.3).unwrap();
        let y = conv_simple(x, Tensor::zeros(&[2, 3, 3, 3]).unwrap(), Tensor::full(&[2], 7.0).unwrap(), 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(&[1, 2, 3, 3]).unwrap();
        let r = conv_simple(x.clone(), Tensor::zeros(&[1, 3, 1, 1]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid);
        assert!(matches!(r, Err(Error::ChannelMismatch { .. })));
        let r = conv_simple(x, Tensor::zeros(&[1, 2, 4, 4]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid);
        assert!(matches!(r, Err(Error::KernelTooLarge { .. })));
    }

    #[test]
    fn same_padding_preserves_extent_for_odd_kernels() {
        for k in (1..=7).step_by(2) {
            let x = Tensor::zeros(&[1, 1, 9, 6]).unwrap();
            let y = conv_simple(x, Tensor::zeros(&[1, 1, k, k]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Same).unwrap();
            assert_eq!(y.shape(), &[1, 1, 9, 6], "kernel {k}");
        }
    }

    #[test]
    fn same_padding_with_stride_rounds_up() {
        let g = conv_geometry(&[1, 1, 7, 8], &[1, 1, 7, 7], 2, Padding::Same, 1, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        // total pad along H is 3*2+7-7=6, along W 3*2+7-8=5 (extra goes to the right)
        assert_eq!((g.pad_top, g.pad_left), (3, 2));
    }

    #[test]
    fn separable_parameter_count_is_smaller() {
        let (c, o, k) = (8usize, 8usize, 3usize);
        let separable = c * k * k + o * c + o;
        let full = o * c * k * k + o;
        // 72 depthwise + 64 pointwise + 8 bias
        assert_eq!((separable, full), (144, 584));
        assert!(separable < full);
    }
}
