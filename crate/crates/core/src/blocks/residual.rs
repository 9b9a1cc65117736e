use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{concat_channels, conv2d, BatchNorm, Conv2d, ForwardCtx, Padding};
use crate::params::{ParamId, ParamStore};

/// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3x3 same-padded convs.
#[derive(Clone, Debug)]
pub struct Residual<P> {
    pub conv1: Conv2d<P>,
    pub bn1: BatchNorm<P>,
    pub conv2: Conv2d<P>,
    pub bn2: BatchNorm<P>,
}

impl<P> Residual<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Residual<Q> {
        Residual { conv1: self.conv1.map(&mut f), bn1: self.bn1.map(&mut f), conv2: self.conv2.map(&mut f), bn2: self.bn2.map(&mut f) }
    }
}

impl Residual<ParamId> {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: store.conv(&format!("{name}.conv1"), channels, channels, 3, Padding::Same)?,
            bn1: store.batchnorm(&format!("{name}.bn1"), channels)?,
            conv2: store.conv(&format!("{name}.conv2"), channels, channels, 3, Padding::Same)?,
            bn2: store.batchnorm(&format!("{name}.bn2"), channels)?,
        })
    }
}

pub fn residual_block<'t>(input: Var<'t>, p: &Residual<Var<'t>>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    let f = ctx.batchnorm(conv2d(input, &p.conv1)?, &p.bn1)?.relu();
    let f = ctx.batchnorm(conv2d(f, &p.conv2)?, &p.bn2)?;
    let (si, so) = (input.shape(), f.shape());
    if si != so {
        return Err(Error::ShapeChange { input: si, output: so });
    }
    Ok(input.add(f)?.relu())
}

/// Kernel sizes of the multi-scale branches.
pub const GRANULAR_KERNELS: [usize; 4] = [1, 3, 5, 7];

/// Multi-scale aggregation followed by a residual mapping.
#[derive(Clone, Debug)]
pub struct Granular<P> {
    pub branches: Vec<Conv2d<P>>,
    pub residual: Residual<P>,
}

impl<P> Granular<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Granular<Q> {
        Granular { branches: self.branches.iter().map(|c| c.map(&mut f)).collect(), residual: self.residual.map(f) }
    }
}

impl Granular<ParamId> {
    pub fn build(store: &mut ParamStore, name: &str, in_ch: usize, filters: usize) -> Result<Self> {
        let branches = GRANULAR_KERNELS
            .iter()
            .map(|&k| store.conv(&format!("{name}.k{k}"), in_ch, filters, k, Padding::Same))
            .collect::<Result<Vec<_>>>()?;
        let residual = Residual::build(store, &format!("{name}.residual"), filters * GRANULAR_KERNELS.len())?;
        Ok(Self { branches, residual })
    }
}

/// `residual_block(concat(conv_1(x), conv_3(x), conv_5(x), conv_7(x)))`.
pub fn granular_feature_integration<'t>(input: Var<'t>, p: &Granular<Var<'t>>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    let scales = p.branches.iter().map(|c| conv2d(input, c)).collect::<Result<Vec<_>>>()?;
    residual_block(concat_channels(&scales)?, &p.residual, ctx)
}
