//! Conv-64F feature extractor with intermediate taps.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, ArrayD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, pooled_len, ConvBlock, ConvBlockCache, Mode, Param, Parameters};
use crate::scalar::Scalar;

/// Block outputs used for graph construction. Block numbering starts at 1.
pub const DEFAULT_TAPS: [usize; 3] = [2, 3, 4];

/// Target size of the first block's output per eval-mode chunk.
const EVAL_CHUNK_ELEMENTS: usize = 1 << 19;

#[derive(Clone, Debug)]
pub struct Backbone<S> {
    blocks: Vec<ConvBlock<S>>,
    input_shape: [usize; 3],
}

/// Feature maps keyed by block number, unflattened (`[n, C, h, w]`).
///
/// Row order is the episode node order.
#[derive(Clone, Debug)]
pub struct MultiLayerEmbeddings<S> {
    pub taps: BTreeMap<usize, Array4<S>>,
}

impl<S: Scalar> MultiLayerEmbeddings<S> {
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.keys().copied()
    }

    pub fn get(&self, layer: usize) -> Option<&Array4<S>> {
        self.taps.get(&layer)
    }

    /// `[n, D]` view of one tap.
    pub fn flattened(&self, layer: usize) -> Option<Array2<S>> {
        self.taps.get(&layer).map(flatten)
    }

    pub fn dim(&self, layer: usize) -> Option<usize> {
        self.taps.get(&layer).map(|t| t.len() / t.shape()[0])
    }
}

pub fn flatten<S: Scalar>(t: &Array4<S>) -> Array2<S> {
    let n = t.shape()[0];
    let d = t.len() / n.max(1);
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, d))
        .expect("contiguous tap")
}

pub struct BackboneTrace<S> {
    caches: Vec<ConvBlockCache<S>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], width: usize, n_blocks: usize, rng: &mut R) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| ConvBlock::new(if i == 0 { input_shape[0] } else { width }, width, rng))
            .collect();
        Self { blocks, input_shape }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.blocks[0].conv.out_channels()
    }

    /// `[C, h, w]` of the output of `block` (1-based) for the configured input.
    pub fn tap_shape(&self, block: usize) -> [usize; 3] {
        tap_shape(self.input_shape, self.width(), block)
    }

    pub fn forward(&self, images: &Array4<S>, mode: Mode, taps: &[usize]) -> Result<(MultiLayerEmbeddings<S>, BackboneTrace<S>)> {
        let (n, c, h, w) = images.dim();
        let [ec, eh, ew] = self.input_shape;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Shape {
                context: "backbone input".into(),
                expected: vec![n, ec, eh, ew],
                received: vec![n, c, h, w],
            });
        }
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.blocks.len()) {
            return Err(Error::Config(format!("tap {bad} outside blocks 1..={}", self.blocks.len())));
        }
        let last = taps.iter().copied().max().unwrap_or(0);
        let chunk = (EVAL_CHUNK_ELEMENTS / (self.width() * h * w).max(1)).max(1);
        if mode == Mode::Eval && n > chunk {
            // Images are independent under running statistics, so small
            // chunks give identical outputs with cache-sized intermediates.
            let mut parts: BTreeMap<usize, Vec<Array4<S>>> = BTreeMap::new();
            for start in (0..n).step_by(chunk) {
                let part = images.slice(s![start..(start + chunk).min(n), .., .., ..]).to_owned();
                let (emb, _) = self.run_blocks(&part, mode, taps, last)?;
                for (layer, t) in emb.taps {
                    parts.entry(layer).or_default().push(t);
                }
            }
            let taps = parts
                .into_iter()
                .map(|(layer, ts)| {
                    let views: Vec<_> = ts.iter().map(|t| t.view()).collect();
                    (layer, ndarray::concatenate(Axis(0), &views).expect("chunks share a shape"))
                })
                .collect();
            return Ok((MultiLayerEmbeddings { taps }, BackboneTrace { caches: Vec::new() }));
        }
        self.run_blocks(images, mode, taps, last)
    }

    fn run_blocks(&self, images: &Array4<S>, mode: Mode, taps: &[usize], last: usize) -> Result<(MultiLayerEmbeddings<S>, BackboneTrace<S>)> {
        let mut out = BTreeMap::new();
        let mut caches = Vec::with_capacity(last);
        let mut x = images.clone();
        for (i, block) in self.blocks.iter().take(last).enumerate() {
            let (y, cache) = block.forward(&x, mode)?;
            caches.push(cache);
            if taps.contains(&(i + 1)) {
                out.insert(i + 1, y.clone());
            }
            x = y;
        }
        Ok((MultiLayerEmbeddings { taps: out }, BackboneTrace { caches }))
    }

    /// Backpropagates tap gradients (keyed by block number) through the blocks.
    pub fn backward(&mut self, trace: &BackboneTrace<S>, mut dtaps: BTreeMap<usize, Array4<S>>) {
        let depth = trace.caches.len();
        let mut grad: Option<Array4<S>> = None;
        for b in (1..=depth).rev() {
            if let Some(d) = dtaps.remove(&b) {
                grad = Some(match grad {
                    Some(g) => g + &d,
                    None => d,
                });
            }
            let Some(g) = grad.take() else { continue };
            grad = self.blocks[b - 1].backward(&trace.caches[b - 1], &g, b > 1);
        }
    }

    pub fn commit(&mut self, trace: &BackboneTrace<S>) {
        for (block, cache) in self.blocks.iter_mut().zip(&trace.caches) {
            block.commit(cache);
        }
    }
}

pub fn tap_shape(input_shape: [usize; 3], width: usize, block: usize) -> [usize; 3] {
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for _ in 0..block {
        h = pooled_len(h);
        w = pooled_len(w);
    }
    [width, h, w]
}

impl<S: Scalar> Parameters<S> for Backbone<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<S>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<S>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.buffers_mut(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tap_dimensions_for_84px_inputs() {
        assert_eq!(tap_shape([3, 84, 84], 64, 2), [64, 21, 21]);
        assert_eq!(tap_shape([3, 84, 84], 64, 3), [64, 10, 10]);
        assert_eq!(tap_shape([3, 84, 84], 64, 4), [64, 5, 5]);
        assert_eq!(tap_shape([3, 8, 8], 64, 4), [64, 1, 1]);
    }

    #[test]
    fn chunked_eval_matches_one_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Backbone::<f32>::new([3, 40, 40], 64, 4, &mut rng);
        let x = Array4::from_shape_fn((7, 3, 40, 40), |(b, c, y, x)| ((b * 5 + c * 3 + y * 7 + x) % 13) as f32 / 13.0);
        let (chunked, _) = net.forward(&x, Mode::Eval, &DEFAULT_TAPS).unwrap();
        let (whole, _) = net.run_blocks(&x, Mode::Eval, &DEFAULT_TAPS, 4).unwrap();
        assert_eq!(chunked.taps, whole.taps);
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Backbone::<f64>::new([3, 16, 16], 8, 4, &mut rng);
        let mut ps = Vec::new();
        net.params_mut("", &mut ps);
        for (name, p) in ps {
            if name.ends_with("conv.weight") {
                p.value.fill(0.0);
            }
        }
        let x = Array4::from_shape_fn((3, 3, 16, 16), |(b, c, y, x)| (b + c + y * x) as f64);
        for mode in [Mode::Train, Mode::Eval] {
            let (emb, _) = net.forward(&x, mode, &DEFAULT_TAPS).unwrap();
            for t in emb.taps.values() {
                assert!(t.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn wrong_input_shape_names_both_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Backbone::<f32>::new([3, 16, 16], 8, 4, &mut rng);
        let err = net
            .forward(&Array4::zeros((2, 3, 15, 16)), Mode::Eval, &DEFAULT_TAPS)
            .map(|_| ())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3, 16, 16]") && msg.contains("[2, 3, 15, 16]"), "{msg}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Backbone::<f32>::new([3, 16, 16], 8, 4, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(b, c, y, x)| ((b * 31 + c * 7 + y * 3 + x) as f32).sin());
        let (a, _) = net.forward(&x, Mode::Eval, &DEFAULT_TAPS).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval, &DEFAULT_TAPS).unwrap();
        for l in DEFAULT_TAPS {
            assert_eq!(a.get(l).unwrap(), b.get(l).unwrap());
        }
    }
}
