//! The full multi-layer propagation network: backbone taps → length scales →
//! per-layer graphs → label propagation → weighted cross-entropy.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::backbone::{tap_shape, Backbone, BackboneTrace, DEFAULT_TAPS};
use crate::datasets::Dataset;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::{build_operator, operator_backward, GraphTrace, PropagationOperator};
use crate::nn::{join, Mode, Param, Parameters};
use crate::propagation::{
    class_probabilities, cross_entropy_grad, episode_loss, initial_scores_from_labels, predict, propagate_backward,
    propagate_with_factors, ClassProbabilities, LossBreakdown, LuFactors, ScoreMatrix,
};
use crate::relation::{RelationNet, RelationShape, RelationTrace};
use crate::rng::{stream, STREAM_BACKBONE_INIT, STREAM_RELATION_INIT};
use crate::scalar::Scalar;

fn default_input_shape() -> [usize; 3] {
    [3, 84, 84]
}
fn default_width() -> usize {
    64
}
fn default_blocks() -> usize {
    4
}
fn default_taps() -> Vec<usize> {
    DEFAULT_TAPS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[C, H, W]` of the input images.
    #[serde(default = "default_input_shape")]
    pub input_shape: [usize; 3],
    /// Filters per backbone block.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Blocks whose outputs get a graph. `[4]` alone is the single-layer baseline.
    #[serde(default = "default_taps")]
    pub taps: Vec<usize>,
    #[serde(default)]
    pub relation: RelationShape,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: default_input_shape(),
            width: default_width(),
            blocks: default_blocks(),
            taps: default_taps(),
            relation: RelationShape::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.width == 0 || self.blocks == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("at least one tap is required".into()));
        }
        let mut sorted = self.taps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.taps {
            return Err(Error::Config("taps must be strictly increasing".into()));
        }
        if let Some(&bad) = self.taps.iter().find(|&&t| t == 0 || t > self.blocks) {
            return Err(Error::Config(format!("tap {bad} outside blocks 1..={}", self.blocks)));
        }
        if self.relation.hidden == 0 || self.relation.conv_channels.contains(&0) {
            return Err(Error::Config("relation network widths must be positive".into()));
        }
        Ok(())
    }

    /// Prediction layer: the deepest tap.
    pub fn head_layer(&self) -> usize {
        *self.taps.last().expect("validated non-empty")
    }
}

/// Graph hyperparameters shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSettings {
    pub alpha: f64,
    pub m: usize,
}

/// Images and labels of one episode in node order (support first).
#[derive(Clone, Debug)]
pub struct EpisodeBatch<S> {
    pub images: Array4<S>,
    /// Labels for every node; query entries are only read by the loss.
    pub labels: Vec<usize>,
    pub n_support: usize,
    pub n_way: usize,
}

impl<S: Scalar> EpisodeBatch<S> {
    pub fn from_episode(dataset: &Dataset, episode: &Episode) -> Self {
        Self {
            images: dataset.batch(&episode.node_examples()),
            labels: episode.node_labels(),
            n_support: episode.n_support(),
            n_way: episode.n_way(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.labels[self.n_support..]
    }
}

/// Everything one layer's graph and propagation produced.
pub struct LayerState<S> {
    pub embedding_shape: [usize; 4],
    pub sigma: Array1<S>,
    pub operator: PropagationOperator<S>,
    pub graph: GraphTrace<S>,
    pub initial: ScoreMatrix<S>,
    pub propagated: ScoreMatrix<S>,
    pub probabilities: ClassProbabilities<S>,
    relation: Option<RelationTrace<S>>,
    factors: LuFactors<S>,
}

pub struct EpisodeForward<S> {
    pub layers: BTreeMap<usize, LayerState<S>>,
    pub loss: LossBreakdown,
    backbone: Option<BackboneTrace<S>>,
    mode: Mode,
    alpha: f64,
}

impl<S: Scalar> EpisodeForward<S> {
    pub fn layer(&self, layer: usize) -> Option<&LayerState<S>> {
        self.layers.get(&layer)
    }
}

#[derive(Clone, Debug)]
pub struct LookBackNet<S> {
    config: ModelConfig,
    pub backbone: Backbone<S>,
    pub relations: BTreeMap<usize, RelationNet<S>>,
}

impl<S: Scalar> LookBackNet<S> {
    /// Randomly initialized network. The backbone and each relation network
    /// draw from their own stream of `seed`, so dropping taps leaves the
    /// remaining parameters unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(
            config.input_shape,
            config.width,
            config.blocks,
            &mut stream(seed, STREAM_BACKBONE_INIT),
        );
        let relations = config
            .taps
            .iter()
            .map(|&layer| {
                let shape = tap_shape(config.input_shape, config.width, layer);
                let mut rng = stream(seed, STREAM_RELATION_INIT + layer as u64);
                (layer, RelationNet::new(shape, &config.relation, &mut rng))
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            relations,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn taps(&self) -> &[usize] {
        &self.config.taps
    }

    /// Runs the whole pipeline. In `Train` mode batch norm uses batch
    /// statistics; nothing is mutated (see [`Self::commit`]).
    pub fn forward(
        &self,
        batch: &EpisodeBatch<S>,
        settings: GraphSettings,
        weights: &BTreeMap<usize, f64>,
        mode: Mode,
    ) -> Result<EpisodeForward<S>> {
        let n = batch.n_nodes();
        if batch.images.shape()[0] != n {
            return Err(Error::Shape {
                context: "episode batch".into(),
                expected: vec![n],
                received: vec![batch.images.shape()[0]],
            });
        }
        if settings.m >= n {
            return Err(Error::NeighborsTooLarge { m: settings.m, n_nodes: n });
        }
        let (embeddings, backbone_trace) = self.backbone.forward(&batch.images, mode, &self.config.taps)?;
        let p0 = initial_scores_from_labels::<S>(&batch.labels[..batch.n_support], n, batch.n_way);
        let mut layers = BTreeMap::new();
        for (&layer, relation) in &self.relations {
            let tap = embeddings.get(layer).expect("tap computed for every relation network");
            let (sigma, rtrace) = relation.forward(tap, mode, layer)?;
            let flat = embeddings.flattened(layer).expect("tap present");
            let (operator, graph) = build_operator(flat.view(), sigma.view(), settings.m)?;
            let (propagated, factors) = propagate_with_factors(&operator, &p0, settings.alpha)?;
            let probabilities = class_probabilities(&propagated);
            let sh = tap.shape();
            layers.insert(
                layer,
                LayerState {
                    embedding_shape: [sh[0], sh[1], sh[2], sh[3]],
                    sigma,
                    operator,
                    graph,
                    initial: p0.clone(),
                    propagated,
                    probabilities,
                    relation: (mode == Mode::Train).then_some(rtrace),
                    factors,
                },
            );
        }
        let probs: BTreeMap<usize, ClassProbabilities<S>> =
            layers.iter().map(|(&l, s)| (l, s.probabilities.clone())).collect();
        let loss = episode_loss(&probs, &batch.labels, weights);
        Ok(EpisodeForward {
            layers,
            loss,
            backbone: (mode == Mode::Train).then_some(backbone_trace),
            mode,
            alpha: settings.alpha,
        })
    }

    /// Accumulates gradients of the weighted loss into every parameter.
    pub fn backward(&mut self, fwd: &EpisodeForward<S>, labels: &[usize]) -> Result<()> {
        if fwd.mode != Mode::Train {
            return Err(Error::Config("backward requires a training-mode forward".into()));
        }
        let mut dtaps = BTreeMap::new();
        for (&layer, state) in &fwd.layers {
            let w = fwd.loss.weights.get(&layer).copied().unwrap_or(0.0);
            let d_p = cross_entropy_grad(&state.probabilities, labels, w);
            let d_l = propagate_backward(&state.factors, &state.propagated, &d_p, fwd.alpha);
            let (d_emb, d_sigma) = operator_backward(&state.graph, &state.operator, &d_l);
            let relation = self.relations.get_mut(&layer).expect("relation network per layer");
            let rtrace = state.relation.as_ref().expect("training trace");
            let mut d_tap = relation.backward(rtrace, &d_sigma);
            let d_emb = d_emb
                .into_shape_with_order(state.embedding_shape)
                .expect("embedding gradient matches tap");
            d_tap += &d_emb;
            dtaps.insert(layer, d_tap);
        }
        let trace = fwd.backbone.as_ref().expect("training trace");
        self.backbone.backward(trace, dtaps);
        Ok(())
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn commit(&mut self, fwd: &EpisodeForward<S>) {
        if let Some(trace) = &fwd.backbone {
            self.backbone.commit(trace);
        }
        for (layer, state) in &fwd.layers {
            if let (Some(rel), Some(trace)) = (self.relations.get_mut(layer), &state.relation) {
                rel.commit(trace);
            }
        }
    }

    /// Eval-mode predictions for the query nodes from every layer.
    pub fn predict_layers(&self, batch: &EpisodeBatch<S>, settings: GraphSettings) -> Result<BTreeMap<usize, Vec<usize>>> {
        let weights = BTreeMap::new();
        let fwd = self.forward(batch, settings, &weights, Mode::Eval)?;
        Ok(fwd
            .layers
            .iter()
            .map(|(&l, s)| (l, predict(&s.propagated, batch.n_support)))
            .collect())
    }

    pub fn named_params(&self) -> Vec<(String, &Param<S>)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<S>)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &ArrayD<S>)> {
        let mut out = Vec::new();
        self.buffers("", &mut out);
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut ArrayD<S>)> {
        let mut out = Vec::new();
        self.buffers_mut("", &mut out);
        out
    }
}

impl<S: Scalar> Parameters<S> for LookBackNet<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        for (l, r) in &self.relations {
            r.params(&join(prefix, &format!("relation{l}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        for (l, r) in self.relations.iter_mut() {
            r.params_mut(&join(prefix, &format!("relation{l}")), out);
        }
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<S>)>) {
        self.backbone.buffers(&join(prefix, "backbone"), out);
        for (l, r) in &self.relations {
            r.buffers(&join(prefix, &format!("relation{l}")), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<S>)>) {
        self.backbone.buffers_mut(&join(prefix, "backbone"), out);
        for (l, r) in self.relations.iter_mut() {
            r.buffers_mut(&join(prefix, &format!("relation{l}")), out);
        }
    }
}

/// Per-layer weights as a map over the active taps (layers 2, 3, 4 take
/// `w[0]`, `w[1]`, `w[2]`).
pub fn layer_weights(taps: &[usize], w: [f64; 3]) -> BTreeMap<usize, f64> {
    taps.iter()
        .filter_map(|&t| match t {
            2 => Some((2, w[0])),
            3 => Some((3, w[1])),
            4 => Some((4, w[2])),
            _ => None,
        })
        .collect()
}

#[allow(dead_code)]
fn _assert_send<S: Scalar>() {
    fn is_send<T: Send + Sync>() {}
    is_send::<LookBackNet<S>>();
    is_send::<Array2<S>>();
}
