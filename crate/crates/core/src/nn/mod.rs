//! Differentiable layer primitives over NCHW tensors.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::{concat_channels, concat_depth, dense, dropout, flatten, relu, softmax, unflatten};
pub use conv::{conv2d, conv_geometry, separable_conv2d, Conv2d, Padding, SeparableConv2d};
pub use norm::{batchnorm, BatchNorm, BatchStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use pool::{maxpool2d, maxpool2d_same};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A batch-norm running-statistics update observed during a train-mode pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: NodeId,
    pub running_var: NodeId,
    pub momentum: f32,
    pub stats: BatchStats,
}

/// Per-pass state: mode, dropout seed stream, and collected batch statistics.
pub struct ForwardCtx {
    pub mode: Mode,
    /// When false, dropout passes inputs through even in train mode.
    pub dropout: bool,
    rng: ChaCha8Rng,
    pub stat_updates: Vec<StatUpdate>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self { mode, dropout: true, rng: ChaCha8Rng::seed_from_u64(seed), stat_updates: Vec::new() }
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer, 0)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn dropout<'t>(&mut self, input: Var<'t>, rate: f32) -> Result<Var<'t>> {
        let seed = self.next_seed();
        let mode = if self.dropout { self.mode } else { Mode::Infer };
        dropout(input, rate, mode, seed)
    }

    /// Batch norm that also records the running-stat update in train mode.
    pub fn batchnorm<'t>(&mut self, input: Var<'t>, p: &BatchNorm<Var<'t>>) -> Result<Var<'t>> {
        let (out, stats) = batchnorm(input, p, self.mode)?;
        if let Some(stats) = stats {
            self.stat_updates.push(StatUpdate {
                running_mean: p.running_mean.id(),
                running_var: p.running_var.id(),
                momentum: p.momentum,
                stats,
            });
        }
        Ok(out)
    }
}
