//! Transductive few-shot classification by label propagation over graphs
//! built from several depths of a convolutional feature extractor.
//!
//! The network taps the outputs of backbone blocks 2, 3 and 4, learns an
//! example-wise length scale per tap with a small relation network, builds a
//! Gaussian k-nearest-neighbour graph per tap, propagates support labels to the
//! queries in closed form and trains on a weighted sum of per-layer
//! cross-entropies. Inference predicts from the deepest tap only. Restricting
//! the taps to `[4]` (or zeroing the weights of layers 2 and 3) gives the
//! single-layer transductive propagation baseline.

pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod propagation;
pub mod relation;
pub mod rng;
pub mod scalar;
pub mod training;

pub use backbone::{Backbone, MultiLayerEmbeddings};
pub use checkpoint::{AnyModel, Checkpoint};
pub use datasets::{Dataset, SplitManifest, SyntheticSpec};
pub use episodes::{ClassIndex, Episode, EpisodeSampler, EpisodeSpec};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, PairedReport};
pub use graph::{AffinityGraph, PropagationOperator};
pub use model::{EpisodeBatch, GraphSettings, LookBackNet, ModelConfig};
pub use propagation::{ClassProbabilities, LossBreakdown, ScoreMatrix};
pub use relation::LengthScales;
pub use scalar::{Precision, Scalar};
pub use training::{MetricRecord, TrainConfig};
