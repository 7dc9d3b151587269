//! Layers with explicit forward and backward passes.
//!
//! Forward passes take `&self` and return a cache; backward passes take the
//! cache and accumulate parameter gradients into [`Param::grad`]. Batch-norm
//! running statistics are only touched through an explicit commit step, so a
//! training-mode forward can be replayed (e.g. for finite differences)
//! without side effects.

mod block;
mod conv;
mod linear;
mod norm;
mod pool;

pub use block::{ConvBlock, ConvBlockCache};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BatchNormCache};
pub use pool::{max_pool_2x2, max_pool_2x2_backward, max_pool_2x2_values, pooled_len, PoolIndices};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;

/// Forward-pass mode: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: ArrayD<S>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform init on `[-bound, bound]` with `bound = sqrt(6 / fan_in)`.
    pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        Self::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || S::from_f64_lossy(dist.sample(rng)));
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Uniform access to the named tensors of a module, used by the optimizer,
/// checkpointing and gradient checking.
pub trait Parameters<S: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>);
    /// Non-trainable state (batch-norm running statistics).
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a ArrayD<S>)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut ArrayD<S>)>) {}

    fn zero_grad(&mut self) {
        let mut all = Vec::new();
        self.params_mut("", &mut all);
        for (_, p) in all {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        let mut all = Vec::new();
        self.params("", &mut all);
        all.iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
