//! Per-layer relation networks producing example-wise length scales.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::flatten;
use crate::error::{Error, Result};
use crate::nn::{join, pooled_len, ConvBlock, ConvBlockCache, Linear, Mode, Param, Parameters};
use crate::scalar::{cst, Scalar};

/// Floor added after the softplus so a length scale can never reach zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Layer shapes of one relation network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationShape {
    /// Output channels of the two convolutional blocks.
    pub conv_channels: [usize; 2],
    /// Width of the hidden fully-connected layer.
    pub hidden: usize,
}

impl Default for RelationShape {
    fn default() -> Self {
        Self {
            conv_channels: [64, 1],
            hidden: 8,
        }
    }
}

/// Two conv blocks, then `fc → ReLU → fc` down to one raw score `r`;
/// `σ = softplus(r) + SIGMA_FLOOR`.
#[derive(Clone, Debug)]
pub struct RelationNet<S> {
    blocks: [ConvBlock<S>; 2],
    fc1: Linear<S>,
    fc2: Linear<S>,
    input_shape: [usize; 3],
}

pub struct RelationTrace<S> {
    blocks: [ConvBlockCache<S>; 2],
    pooled_shape: [usize; 4],
    flat: Array2<S>,
    hidden_pre: Array2<S>,
    hidden: Array2<S>,
    raw: Array1<S>,
}

/// Per-layer σ vectors, one entry per episode node.
#[derive(Clone, Debug)]
pub struct LengthScales<S> {
    pub sigma: BTreeMap<usize, Array1<S>>,
}

pub fn softplus<S: Scalar>(r: S) -> S {
    if r > S::zero() {
        r + (-r).exp().ln_1p()
    } else {
        r.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(r: S) -> S {
    if r >= S::zero() {
        S::one() / (S::one() + (-r).exp())
    } else {
        let e = r.exp();
        e / (S::one() + e)
    }
}

/// Inverse of softplus for positive targets.
fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl<S: Scalar> RelationNet<S> {
    /// `input_shape` is the `[C, h, w]` of the tap this network reads.
    ///
    /// The output bias starts at `softplus⁻¹(√D)` with `D = C·h·w`, so initial
    /// length scales match the typical norm of a D-dimensional difference of
    /// normalized features and the Gaussian similarities start out informative.
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], shape: &RelationShape, rng: &mut R) -> Self {
        let [c, h, w] = input_shape;
        let [c1, c2] = shape.conv_channels;
        let blocks = [ConvBlock::new(c, c1, rng), ConvBlock::new(c1, c2, rng)];
        let (ph, pw) = (pooled_len(pooled_len(h)), pooled_len(pooled_len(w)));
        let fc1 = Linear::new(c2 * ph * pw, shape.hidden, rng);
        let mut fc2 = Linear::new(shape.hidden, 1, rng);
        let dim = (c * h * w) as f64;
        fc2.bias.value.fill(cst(inverse_softplus(dim.sqrt())));
        Self {
            blocks,
            fc1,
            fc2,
            input_shape,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn forward(&self, tap: &Array4<S>, mode: Mode, layer: usize) -> Result<(Array1<S>, RelationTrace<S>)> {
        let (n, c, h, w) = tap.dim();
        if [c, h, w] != self.input_shape {
            let [ec, eh, ew] = self.input_shape;
            return Err(Error::Shape {
                context: format!("relation network input (layer {layer})"),
                expected: vec![n, ec, eh, ew],
                received: vec![n, c, h, w],
            });
        }
        let (x1, c1) = self.blocks[0].forward(tap, mode)?;
        let (x2, c2) = self.blocks[1].forward(&x1, mode)?;
        let pooled_shape = [x2.shape()[0], x2.shape()[1], x2.shape()[2], x2.shape()[3]];
        let flat = flatten(&x2);
        let hidden_pre = self.fc1.forward(&flat);
        let hidden = hidden_pre.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let raw = self.fc2.forward(&hidden).column(0).to_owned();
        let floor: S = cst(SIGMA_FLOOR);
        let sigma = raw.mapv(|r| softplus(r) + floor);
        if !sigma.iter().all(|s| s.is_finite()) || !raw.iter().all(|r| r.is_finite()) {
            return Err(Error::RelationOverflow { layer });
        }
        Ok((
            sigma,
            RelationTrace {
                blocks: [c1, c2],
                pooled_shape,
                flat,
                hidden_pre,
                hidden,
                raw,
            },
        ))
    }

    /// Backpropagates `dσ` into the parameters; returns the tap gradient.
    pub fn backward(&mut self, trace: &RelationTrace<S>, dsigma: &Array1<S>) -> Array4<S> {
        let dr = ndarray::Zip::from(dsigma)
            .and(&trace.raw)
            .map_collect(|&ds, &r| ds * sigmoid(r));
        let dr = dr.insert_axis(ndarray::Axis(1));
        let mut dh = self.fc2.backward(&trace.hidden, &dr);
        ndarray::Zip::from(&mut dh)
            .and(&trace.hidden_pre)
            .for_each(|g, &z| {
                if z <= S::zero() {
                    *g = S::zero();
                }
            });
        let dflat = self.fc1.backward(&trace.flat, &dh);
        let dx2 = dflat
            .into_shape_with_order(trace.pooled_shape)
            .expect("flat gradient matches pooled shape");
        let dx1 = self.blocks[1]
            .backward(&trace.blocks[1], &dx2, true)
            .expect("input gradient requested");
        self.blocks[0]
            .backward(&trace.blocks[0], &dx1, true)
            .expect("input gradient requested")
    }

    pub fn commit(&mut self, trace: &RelationTrace<S>) {
        self.blocks[0].commit(&trace.blocks[0]);
        self.blocks[1].commit(&trace.blocks[1]);
    }
}

impl<S: Scalar> Parameters<S> for RelationNet<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        self.blocks[0].params(&join(prefix, "block1"), out);
        self.blocks[1].params(&join(prefix, "block2"), out);
        self.fc1.params(&join(prefix, "fc1"), out);
        self.fc2.params(&join(prefix, "fc2"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        let [b1, b2] = &mut self.blocks;
        b1.params_mut(&join(prefix, "block1"), out);
        b2.params_mut(&join(prefix, "block2"), out);
        self.fc1.params_mut(&join(prefix, "fc1"), out);
        self.fc2.params_mut(&join(prefix, "fc2"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<S>)>) {
        self.blocks[0].buffers(&join(prefix, "block1"), out);
        self.blocks[1].buffers(&join(prefix, "block2"), out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<S>)>) {
        let [b1, b2] = &mut self.blocks;
        b1.buffers_mut(&join(prefix, "block1"), out);
        b2.buffers_mut(&join(prefix, "block2"), out);
    }
}
