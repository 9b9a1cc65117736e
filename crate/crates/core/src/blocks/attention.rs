use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{conv2d, BatchNorm, Conv2d, ForwardCtx, Padding};
use crate::params::{ParamId, ParamStore};

/// Single-head scaled dot-product attention over spatial positions.
///
/// `wq`, `wk`, `wv` are `[C, d_k]`; the output projection is `wo: [d_k, C]`
/// plus `bo: [C]`.
#[derive(Clone, Debug)]
pub struct SelfAttention<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
    pub scale: f32,
    pub attn_dropout: f32,
    pub out_dropout: f32,
    /// Add the block input to its output.
    pub residual: bool,
}

impl<P> SelfAttention<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SelfAttention<Q> {
        SelfAttention {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            scale: self.scale,
            attn_dropout: self.attn_dropout,
            out_dropout: self.out_dropout,
            residual: self.residual,
        }
    }
}

impl SelfAttention<ParamId> {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, d_k: usize, dropout: f32, residual: bool) -> Result<Self> {
        Ok(Self {
            wq: store.kaiming(format!("{name}.wq"), &[channels, d_k], channels)?,
            wk: store.kaiming(format!("{name}.wk"), &[channels, d_k], channels)?,
            wv: store.kaiming(format!("{name}.wv"), &[channels, d_k], channels)?,
            wo: store.kaiming(format!("{name}.wo"), &[d_k, channels], d_k)?,
            bo: store.filled(format!("{name}.bo"), &[channels], 0.0, true)?,
            scale: 1.0 / (d_k as f32).sqrt(),
            attn_dropout: dropout,
            out_dropout: dropout,
            residual,
        })
    }
}

/// Intermediate values of one attention pass.
pub struct AttentionParts<'t> {
    /// `[N, T, T]`, rows sum to one.
    pub weights: Var<'t>,
    /// Projected output before the residual add, `[N, C, H, W]`.
    pub projected: Var<'t>,
    pub output: Var<'t>,
}

pub fn self_attention_parts<'t>(input: Var<'t>, p: &SelfAttention<Var<'t>>, ctx: &mut ForwardCtx) -> Result<AttentionParts<'t>> {
    let shape = input.shape();
    let &[n, c, h, w] = shape.as_slice() else {
        return Err(Error::DimMismatch(format!("self-attention input must be NCHW, got {shape:?}")));
    };
    let wq = p.wq.shape();
    if wq.len() != 2 || wq[0] != c {
        return Err(Error::DimMismatch(format!("query projection {wq:?} for {c} channels")));
    }
    let (t, d_k) = (h * w, wq[1]);
    // [N, C, T] -> [N, T, C] -> [N*T, C]
    let seq = input.reshape(&[n, c, t])?.transpose()?.reshape(&[n * t, c])?;
    let project = |m: Var<'t>| -> Result<Var<'t>> { seq.matmul(m)?.reshape(&[n, t, d_k]) };
    let (q, k, v) = (project(p.wq)?, project(p.wk)?, project(p.wv)?);
    let weights = q.batch_matmul(k.transpose()?)?.scale(p.scale).softmax();
    let z = ctx.dropout(weights, p.attn_dropout)?.batch_matmul(v)?;
    let z = z.reshape(&[n * t, d_k])?.matmul(p.wo)?.add_row_bias(p.bo)?;
    let z = ctx.dropout(z, p.out_dropout)?;
    let projected = z.reshape(&[n, t, c])?.transpose()?.reshape(&[n, c, h, w])?;
    let output = if p.residual { projected.add(input)? } else { projected };
    Ok(AttentionParts { weights, projected, output })
}

/// `softmax(Q K^T * scale) V`, projected back to `C` channels, over the
/// `H*W` positions of each sample.
pub fn self_attention<'t>(input: Var<'t>, p: &SelfAttention<Var<'t>>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    Ok(self_attention_parts(input, p, ctx)?.output)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialAttentionConfig {
    /// Dilation rate of each branch; the branch count is the length.
    pub dilations: Vec<usize>,
    /// Filters per branch; `None` keeps the input channel count.
    pub filters: Option<usize>,
    pub kernel: usize,
}

impl Default for SpatialAttentionConfig {
    fn default() -> Self {
        Self { dilations: vec![1, 2], filters: None, kernel: 3 }
    }
}

impl SpatialAttentionConfig {
    pub fn branches(&self) -> usize {
        self.dilations.len()
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        self.filters.unwrap_or(in_ch)
    }
}

/// Parallel dilated convolution branches, each followed by batch norm.
#[derive(Clone, Debug)]
pub struct SpatialAttention<P> {
    pub branches: Vec<(Conv2d<P>, BatchNorm<P>)>,
}

impl<P> SpatialAttention<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SpatialAttention<Q> {
        SpatialAttention { branches: self.branches.iter().map(|(c, b)| (c.map(&mut f), b.map(&mut f))).collect() }
    }
}

impl SpatialAttention<ParamId> {
    pub fn build(store: &mut ParamStore, name: &str, in_ch: usize, cfg: &SpatialAttentionConfig) -> Result<Self> {
        if cfg.dilations.is_empty() || cfg.dilations.contains(&0) {
            return Err(Error::InvalidArgument(format!("spatial attention needs >= 1 positive dilation, got {:?}", cfg.dilations)));
        }
        let out = cfg.out_channels(in_ch);
        let mut branches = Vec::with_capacity(cfg.branches());
        for (i, &rate) in cfg.dilations.iter().enumerate() {
            let mut conv = store.conv(&format!("{name}.branch{i}.conv"), in_ch, out, cfg.kernel, Padding::Same)?;
            conv.dilation = rate;
            let bn = store.batchnorm(&format!("{name}.branch{i}.bn"), out)?;
            branches.push((conv, bn));
        }
        Ok(Self { branches })
    }
}

/// Elementwise sum of `batchnorm(dilated_conv_i(x))` over all branches.
pub fn spatial_attention<'t>(input: Var<'t>, p: &SpatialAttention<Var<'t>>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (conv, bn) in &p.branches {
        let t = ctx.batchnorm(conv2d(input, conv)?, bn)?;
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("spatial attention without branches".into()))
}
