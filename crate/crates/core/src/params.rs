//! Named parameter storage and the seeded initializers used to fill it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{BatchNorm, Conv2d, Padding, SeparableConv2d};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    rng: ChaCha8Rng,
    /// Running-statistics momentum given to batch norms created from now on.
    pub bn_momentum: f32,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), bn_momentum: crate::nn::DEFAULT_MOMENTUM }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f32).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng)?;
        Ok(self.add(name, t, true))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], value: f32, trainable: bool) -> Result<ParamId> {
        Ok(self.add(name, Tensor::full(shape, value)?, trainable))
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, padding: Padding) -> Result<Conv2d<ParamId>> {
        let weight = self.kaiming(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel)?;
        let bias = self.filled(format!("{name}.bias"), &[out_ch], 0.0, true)?;
        Ok(Conv2d::new(weight, Some(bias), 1, padding))
    }

    pub fn separable(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<SeparableConv2d<ParamId>> {
        Ok(SeparableConv2d {
            depthwise: self.kaiming(format!("{name}.depthwise"), &[in_ch, 1, kernel, kernel], kernel * kernel)?,
            pointwise: self.kaiming(format!("{name}.pointwise"), &[out_ch, in_ch, 1, 1], in_ch)?,
            bias: self.filled(format!("{name}.bias"), &[out_ch], 0.0, true)?,
        })
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<BatchNorm<ParamId>> {
        Ok(BatchNorm {
            gamma: self.filled(format!("{name}.gamma"), &[channels], 1.0, true)?,
            beta: self.filled(format!("{name}.beta"), &[channels], 0.0, true)?,
            running_mean: self.filled(format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: self.filled(format!("{name}.running_var"), &[channels], 1.0, false)?,
            eps: crate::nn::DEFAULT_EPS,
            momentum: self.bn_momentum,
        })
    }

    /// `[fan_in, units]` weight plus zero bias.
    pub fn dense(&mut self, name: &str, fan_in: usize, units: usize) -> Result<(ParamId, ParamId)> {
        let w = self.kaiming(format!("{name}.weight"), &[fan_in, units], fan_in)?;
        let b = self.filled(format!("{name}.bias"), &[units], 0.0, true)?;
        Ok((w, b))
    }

    /// Put every tensor on `tape`: trainable ones as gradient-tracked leaves,
    /// buffers as constants. The result is indexed by [`ParamId`].
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| if e.trainable { tape.var(e.tensor.clone()) } else { tape.constant(e.tensor.clone()) })
                .collect(),
        }
    }
}

/// Tape handles for every entry of a store.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: &ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Store index of the tensor behind a tape node, if it came from the store.
    pub fn param_of(&self, node: crate::autodiff::NodeId) -> Option<ParamId> {
        self.vars.iter().position(|v| v.id() == node).map(ParamId)
    }
}
