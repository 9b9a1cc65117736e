//! The full classifier: assembly, forward pass, parameter counting and
//! checkpoint files.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub(crate) use config::parse;

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    inception_block, residual_block, self_attention, spatial_attention, Inception, Residual, SelfAttention, SpatialAttention,
};
use crate::error::{Error, Result};
use crate::nn::{
    conv2d, dense, flatten, maxpool2d, separable_conv2d, BatchNorm, Conv2d, ForwardCtx, Padding, SeparableConv2d, StatUpdate,
};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Separable residual block: `pool(relu(bn(sep(relu(bn(sep(x))))) + shortcut(x)))`.
#[derive(Clone, Debug)]
pub struct SepBlock<P> {
    pub shortcut: Conv2d<P>,
    pub sep1: SeparableConv2d<P>,
    pub bn1: BatchNorm<P>,
    pub sep2: SeparableConv2d<P>,
    pub bn2: BatchNorm<P>,
}

impl<P> SepBlock<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SepBlock<Q> {
        SepBlock {
            shortcut: self.shortcut.map(&mut f),
            sep1: self.sep1.map(&mut f),
            bn1: self.bn1.map(&mut f),
            sep2: self.sep2.map(&mut f),
            bn2: self.bn2.map(&mut f),
        }
    }
}

/// Every layer of the network, generic over the parameter handle.
#[derive(Clone, Debug)]
pub struct Layers<P> {
    pub stem: Conv2d<P>,
    pub convs: Vec<(BatchNorm<P>, Conv2d<P>)>,
    pub inception1: Inception<P>,
    pub attention: SelfAttention<P>,
    pub sep_blocks: Vec<SepBlock<P>>,
    pub spatial: SpatialAttention<P>,
    pub inception2: Inception<P>,
    pub residual: Residual<P>,
    pub hidden: (P, P),
    pub head: (P, P),
}

impl<P> Layers<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Layers<Q> {
        Layers {
            stem: self.stem.map(&mut f),
            convs: self.convs.iter().map(|(b, c)| (b.map(&mut f), c.map(&mut f))).collect(),
            inception1: self.inception1.map(&mut f),
            attention: self.attention.map(&mut f),
            sep_blocks: self.sep_blocks.iter().map(|b| b.map(&mut f)).collect(),
            spatial: self.spatial.map(&mut f),
            inception2: self.inception2.map(&mut f),
            residual: self.residual.map(&mut f),
            hidden: (f(&self.hidden.0), f(&self.hidden.1)),
            head: (f(&self.head.0), f(&self.head.1)),
        }
    }
}

/// Spatial extent after each downsampling stage, or the first stage that
/// leaves nothing to work with.
fn spatial_plan(cfg: &ModelConfig) -> Result<usize> {
    let underflow = |stage: &str, size: i64| Error::ShapeUnderflow { input_size: cfg.input_size, stage: stage.into(), size };
    if cfg.input_size == 0 {
        return Err(underflow("input", 0));
    }
    let mut s = cfg.input_size.div_ceil(2);
    if s < 3 {
        return Err(underflow("stem max pool", (s as i64 - 3) / 2 + 1));
    }
    s = (s - 3) / 2 + 1;
    for (i, _) in cfg.sep_block_filters.iter().enumerate() {
        if s < 2 {
            return Err(underflow(&format!("separable block {i} pool"), (s / 2) as i64));
        }
        s /= 2;
    }
    Ok(s)
}

/// A built network: configuration, parameter tensors and layer wiring.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    config: ModelConfig,
    store: ParamStore,
    layers: Layers<ParamId>,
}

impl ModelGraph {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let final_size = spatial_plan(cfg)?;
        let mut st = ParamStore::new(cfg.seed);
        st.bn_momentum = cfg.bn_momentum;
        let s = &mut st;

        let mut stem = s.conv("stem", 1, cfg.stem_filters, cfg.stem_kernel, Padding::Same)?;
        stem.stride = 2;
        let mut ch = cfg.stem_filters;

        let mut convs = Vec::new();
        for (i, &f) in cfg.conv_filters.iter().enumerate() {
            let bn = s.batchnorm(&format!("conv{i}.bn"), ch)?;
            let conv = s.conv(&format!("conv{i}"), ch, f, 3, Padding::Same)?;
            convs.push((bn, conv));
            ch = f;
        }

        let inception1 = Inception::build(s, "inception1", ch, &cfg.inception1)?;
        ch = cfg.inception1.out_channels();

        let d_k = cfg.attention_dim.unwrap_or(ch);
        let attention = SelfAttention::build(s, "attention", ch, d_k, cfg.attention_dropout, cfg.attention_residual)?;

        let mut sep_blocks = Vec::new();
        for (i, &f) in cfg.sep_block_filters.iter().enumerate() {
            let name = format!("sep{i}");
            sep_blocks.push(SepBlock {
                shortcut: s.conv(&format!("{name}.shortcut"), ch, f, 1, Padding::Same)?,
                sep1: s.separable(&format!("{name}.sep1"), ch, f, 3)?,
                bn1: s.batchnorm(&format!("{name}.bn1"), f)?,
                sep2: s.separable(&format!("{name}.sep2"), f, f, 3)?,
                bn2: s.batchnorm(&format!("{name}.bn2"), f)?,
            });
            ch = f;
        }

        let spatial = SpatialAttention::build(s, "spatial", ch, &cfg.spatial_attn)?;
        ch = cfg.spatial_attn.out_channels(ch);

        let inception2 = Inception::build(s, "inception2", ch, &cfg.inception2)?;
        ch = cfg.inception2.out_channels();

        let residual = Residual::build(s, "residual", ch)?;
        let hidden = s.dense("hidden", ch * final_size * final_size, cfg.dense_units)?;
        let head = s.dense("head", cfg.dense_units, cfg.class_count)?;

        let layers = Layers { stem, convs, inception1, attention, sep_blocks, spatial, inception2, residual, hidden, head };
        Ok(Self { config: cfg.clone(), store: st, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layers(&self) -> &Layers<ParamId> {
        &self.layers
    }

    /// Element count of all trainable tensors; running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Number of layers: convolutions (a separable conv counts once), batch
    /// norms, pools, the attention block, flatten, dense, dropout and softmax.
    pub fn layer_count(&self) -> usize {
        let cfg = &self.config;
        let inception = 6 + 1 + 1; // convs, pool, concat
        let stem = 2;
        let convs = 2 * cfg.conv_filters.len();
        let sep = 7 * cfg.sep_block_filters.len(); // shortcut, 2 sep, 2 bn, add, pool
        let spatial = 2 * cfg.spatial_attn.branches();
        let residual = 5; // 2 conv, 2 bn, add
        let tail = 5; // flatten, dense, dropout, dense, softmax
        stem + convs + inception + 1 + sep + spatial + inception + residual + tail
    }

    /// Put the parameters on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind(tape)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            &[_, 1, h, w] if h == s && w == s => Ok(()),
            _ => Err(Error::ShapeMismatch(format!("model expects [N, 1, {s}, {s}], got {shape:?}"))),
        }
    }

    /// Pre-softmax scores `[N, class_count]` for `input: [N, 1, S, S]`.
    pub fn logits<'t>(&self, bound: &Bound<'t>, input: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        self.check_input(&input.shape())?;
        let l = self.layers.map(|id| bound.var(id));

        let mut x = conv2d(input, &l.stem)?.relu();
        x = maxpool2d(x, 3, 2)?;
        for (bn, conv) in &l.convs {
            x = conv2d(ctx.batchnorm(x, bn)?, conv)?.relu();
        }
        x = inception_block(x, &l.inception1)?;
        x = self_attention(x, &l.attention, ctx)?;
        for b in &l.sep_blocks {
            let short = conv2d(x, &b.shortcut)?;
            let main = ctx.batchnorm(separable_conv2d(x, &b.sep1)?, &b.bn1)?.relu();
            let main = ctx.batchnorm(separable_conv2d(main, &b.sep2)?, &b.bn2)?;
            x = maxpool2d(main.add(short)?.relu(), 2, 2)?;
        }
        x = spatial_attention(x, &l.spatial, ctx)?;
        x = inception_block(x, &l.inception2)?;
        x = residual_block(x, &l.residual, ctx)?;
        x = dense(flatten(x)?, l.hidden.0, l.hidden.1)?.relu();
        x = ctx.dropout(x, self.config.dropout_rate)?;
        dense(x, l.head.0, l.head.1)
    }

    /// Class probabilities `[N, class_count]` as a tape variable.
    pub fn forward_var<'t>(&self, bound: &Bound<'t>, input: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        Ok(self.logits(bound, input, ctx)?.softmax())
    }

    /// Class probabilities for a batch `[N, 1, S, S]`. Batch statistics seen in
    /// train mode are left in `ctx.stat_updates`; nothing is written back.
    pub fn forward(&self, batch: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let input = tape.constant(batch.clone());
        let probs = self.forward_var(&bound, input, ctx)?;
        let out = probs.value();
        Ok((*out).clone())
    }

    /// Inference-mode probabilities.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch, &mut ForwardCtx::infer())
    }

    /// Fold recorded batch statistics into the running buffers they came from.
    pub fn apply_stat_updates(&mut self, bound: &Bound<'_>, updates: &[StatUpdate]) {
        for u in updates {
            let (Some(m), Some(v)) = (bound.param_of(u.running_mean), bound.param_of(u.running_var)) else {
                continue;
            };
            let mut rm = self.store.get(m).clone();
            let mut rv = self.store.get(v).clone();
            u.stats.apply(&mut rm, &mut rv, u.momentum);
            *self.store.get_mut(m) = rm;
            *self.store.get_mut(v) = rv;
        }
    }
}

impl ModelGraph {
    /// Replace every running mean and variance with the exact statistics of
    /// `batches`, seen in train mode with dropout off. Each layer's statistics
    /// are pooled over all batches, weighted by batch size.
    pub fn recalibrate_batchnorm<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
        // per batch-norm layer: (mean id, var id, sum of w*mean, sum of w*(var + mean^2))
        let mut acc: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut weight = 0.0f64;
        for batch in batches {
            let tape = Tape::new();
            let bound = self.bind(&tape);
            let mut ctx = ForwardCtx::new(crate::nn::Mode::Train, 0);
            ctx.dropout = false;
            self.forward_var(&bound, tape.constant(batch.clone()), &mut ctx)?;
            let w = batch.shape()[0] as f64;
            weight += w;
            if acc.is_empty() {
                for u in &ctx.stat_updates {
                    let (Some(m), Some(v)) = (bound.param_of(u.running_mean), bound.param_of(u.running_var)) else { continue };
                    let c = u.stats.mean.len();
                    acc.push((m, v, vec![0.0; c], vec![0.0; c]));
                }
            }
            for (slot, u) in acc.iter_mut().zip(&ctx.stat_updates) {
                for (i, (&m, &v)) in u.stats.mean.iter().zip(&u.stats.var).enumerate() {
                    let (m, v) = (m as f64, v as f64);
                    slot.2[i] += w * m;
                    slot.3[i] += w * (v + m * m);
                }
            }
        }
        if weight == 0.0 {
            return Ok(());
        }
        for (m, v, sm, sq) in acc {
            let mean: Vec<f64> = sm.iter().map(|s| s / weight).collect();
            let var: Vec<f32> = sq.iter().zip(&mean).map(|(q, mu)| (q / weight - mu * mu).max(0.0) as f32).collect();
            self.store.get_mut(m).data_mut().iter_mut().zip(&mean).for_each(|(d, &mu)| *d = mu as f32);
            self.store.get_mut(v).data_mut().copy_from_slice(&var);
        }
        Ok(())
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<ModelGraph> {
    ModelGraph::build(cfg)
}
