use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{concat_channels, conv2d, maxpool2d_same, Conv2d, Padding};
use crate::params::{ParamId, ParamStore};

/// Filter counts of the four inception paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionConfig {
    /// path 1: 1x1
    pub f11: usize,
    /// path 2: 1x1 reduce, then 3x3
    pub f21: usize,
    pub f22: usize,
    /// path 3: 1x1 reduce, then 5x5
    pub f31: usize,
    pub f32: usize,
    /// path 4: 2x2 max pool, then 1x1
    pub f41: usize,
}

impl InceptionConfig {
    pub fn new(f11: usize, f21: usize, f22: usize, f31: usize, f32: usize, f41: usize) -> Self {
        Self { f11, f21, f22, f31, f32, f41 }
    }

    pub fn out_channels(&self) -> usize {
        self.f11 + self.f22 + self.f32 + self.f41
    }

    pub fn validate(&self) -> Result<()> {
        if [self.f11, self.f21, self.f22, self.f31, self.f32, self.f41].contains(&0) {
            return Err(Error::InvalidArgument(format!("inception filter counts must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn to_list(&self) -> [usize; 6] {
        [self.f11, self.f21, self.f22, self.f31, self.f32, self.f41]
    }
}

#[derive(Clone, Debug)]
pub struct Inception<P> {
    pub p1: Conv2d<P>,
    pub p2_reduce: Conv2d<P>,
    pub p2: Conv2d<P>,
    pub p3_reduce: Conv2d<P>,
    pub p3: Conv2d<P>,
    pub p4: Conv2d<P>,
}

impl<P> Inception<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Inception<Q> {
        Inception {
            p1: self.p1.map(&mut f),
            p2_reduce: self.p2_reduce.map(&mut f),
            p2: self.p2.map(&mut f),
            p3_reduce: self.p3_reduce.map(&mut f),
            p3: self.p3.map(&mut f),
            p4: self.p4.map(&mut f),
        }
    }
}

impl Inception<ParamId> {
    pub fn build(store: &mut ParamStore, name: &str, in_ch: usize, cfg: &InceptionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            p1: store.conv(&format!("{name}.p1"), in_ch, cfg.f11, 1, Padding::Same)?,
            p2_reduce: store.conv(&format!("{name}.p2_reduce"), in_ch, cfg.f21, 1, Padding::Same)?,
            p2: store.conv(&format!("{name}.p2"), cfg.f21, cfg.f22, 3, Padding::Same)?,
            p3_reduce: store.conv(&format!("{name}.p3_reduce"), in_ch, cfg.f31, 1, Padding::Same)?,
            p3: store.conv(&format!("{name}.p3"), cfg.f31, cfg.f32, 5, Padding::Same)?,
            p4: store.conv(&format!("{name}.p4"), in_ch, cfg.f41, 1, Padding::Same)?,
        })
    }
}

/// The four path outputs before concatenation, each ReLU-activated.
pub fn inception_paths<'t>(input: Var<'t>, p: &Inception<Var<'t>>) -> Result<[Var<'t>; 4]> {
    let p1 = conv2d(input, &p.p1)?.relu();
    let p2 = conv2d(conv2d(input, &p.p2_reduce)?.relu(), &p.p2)?.relu();
    let p3 = conv2d(conv2d(input, &p.p3_reduce)?.relu(), &p.p3)?.relu();
    let p4 = conv2d(maxpool2d_same(input, 2, 1)?, &p.p4)?.relu();
    Ok([p1, p2, p3, p4])
}

/// Four parallel paths (1x1; 1x1 -> 3x3; 1x1 -> 5x5; 2x2 pool -> 1x1),
/// all stride 1 and same-padded, concatenated along depth in path order.
pub fn inception_block<'t>(input: Var<'t>, p: &Inception<Var<'t>>) -> Result<Var<'t>> {
    concat_channels(&inception_paths(input, p)?)
}
