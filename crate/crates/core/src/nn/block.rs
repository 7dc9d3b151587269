use ndarray::{Array4, ArrayD};
use rand::Rng;

use super::{join, max_pool_2x2, max_pool_2x2_backward, max_pool_2x2_values, BatchNorm2d, BatchNormCache, Conv2d, Mode, Param, Parameters, PoolIndices};
use crate::error::Result;
use crate::scalar::Scalar;

/// conv 3×3 → batch norm → ReLU → 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvBlock<S> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<S> {
    input: Array4<S>,
    bn: Option<BatchNormCache<S>>,
    /// Post-ReLU activations; positive entries mark the ReLU pass-through set.
    activated: Array4<S>,
    pool: PoolIndices,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    /// Only a `Train` forward keeps what backward needs; an `Eval` cache is
    /// empty.
    pub fn forward(&self, x: &Array4<S>, mode: Mode) -> Result<(Array4<S>, ConvBlockCache<S>)> {
        let z = self.conv.forward(x)?;
        match mode {
            Mode::Train => {
                let (mut a, cache) = self.bn.forward_train(&z);
                a.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
                let (out, pool) = max_pool_2x2(&a);
                Ok((
                    out,
                    ConvBlockCache {
                        input: x.clone(),
                        bn: Some(cache),
                        activated: a,
                        pool,
                    },
                ))
            }
            Mode::Eval => {
                let a = self.bn.forward_eval_owned(z, true);
                Ok((
                    max_pool_2x2_values(&a),
                    ConvBlockCache {
                        input: Array4::zeros((0, 0, 0, 0)),
                        bn: None,
                        activated: Array4::zeros((0, 0, 0, 0)),
                        pool: PoolIndices::default(),
                    },
                ))
            }
        }
    }

    /// Backward through a training-mode forward.
    pub fn backward(&mut self, cache: &ConvBlockCache<S>, dy: &Array4<S>, need_dx: bool) -> Option<Array4<S>> {
        let mut da = max_pool_2x2_backward(&cache.pool, dy);
        ndarray::Zip::from(&mut da)
            .and(&cache.activated)
            .for_each(|g, &a| {
                if a <= S::zero() {
                    *g = S::zero();
                }
            });
        let bn_cache = cache.bn.as_ref().expect("backward requires a training-mode forward");
        let dz = self.bn.backward(bn_cache, &da);
        self.conv.backward(&cache.input, &dz, need_dx)
    }

    pub fn commit(&mut self, cache: &ConvBlockCache<S>) {
        if let Some(bn) = &cache.bn {
            self.bn.commit(bn);
        }
    }
}

impl<S: Scalar> Parameters<S> for ConvBlock<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<S>)>) {
        self.bn.buffers(&join(prefix, "bn"), out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<S>)>) {
        self.bn.buffers_mut(&join(prefix, "bn"), out);
    }
}
