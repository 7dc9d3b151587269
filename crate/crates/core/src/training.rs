//! Episodic meta-training.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::datasets::Dataset;
use crate::episodes::{EpisodeSampler, EpisodeSpec};
use crate::error::{Error, Result};
use crate::evaluation::{episode_accuracies, mean_ci95};
use crate::model::{layer_weights, EpisodeBatch, GraphSettings, LookBackNet, ModelConfig};
use crate::nn::{Mode, Parameters};
use crate::optim::{step_decay, Adam};
use crate::propagation::LossBreakdown;
use crate::rng::{stream, STREAM_TRAIN_EPISODES, STREAM_VAL_EPISODES};
use crate::scalar::{Precision, Scalar};

fn default_spec() -> EpisodeSpec {
    EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        q_per_class: 15,
    }
}
fn default_alpha() -> f64 {
    0.99
}
fn default_m() -> usize {
    20
}
fn default_weights() -> [f64; 3] {
    [1.0; 3]
}
fn default_lr() -> f64 {
    0.001
}
fn default_decay_factor() -> f64 {
    0.8
}
fn default_decay_every() -> u64 {
    5000
}
fn default_total() -> u64 {
    30_000
}
fn default_eval_every() -> u64 {
    1000
}
fn default_val_episodes() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_spec")]
    pub episode_spec: EpisodeSpec,
    /// Episode shape for validation; differs from `episode_spec` in higher-shot training.
    #[serde(default = "default_spec")]
    pub eval_episode_spec: EpisodeSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Loss weights of layers 2, 3 and 4.
    #[serde(default = "default_weights")]
    pub weights: [f64; 3],
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
    #[serde(default = "default_total")]
    pub total_episodes: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episode_spec: default_spec(),
            eval_episode_spec: default_spec(),
            alpha: default_alpha(),
            m: default_m(),
            weights: default_weights(),
            learning_rate: default_lr(),
            decay_factor: default_decay_factor(),
            decay_every: default_decay_every(),
            total_episodes: default_total(),
            eval_every: default_eval_every(),
            val_episodes: default_val_episodes(),
            seed: 0,
            precision: Precision::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode_spec.validate()?;
        self.eval_episode_spec.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("layer weights must be finite and nonnegative".into()));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("layer weights must not all be zero".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.decay_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("decay_every and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn graph_settings(&self) -> GraphSettings {
        GraphSettings {
            alpha: self.alpha,
            m: self.m,
        }
    }

    /// Learning rate used for the episode with zero-based index `episode`.
    pub fn learning_rate_at(&self, episode: u64) -> f64 {
        step_decay(self.learning_rate, self.decay_factor, self.decay_every, episode)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// One-based count of completed episodes.
    pub episode: u64,
    pub loss_total: f64,
    pub loss_l2: Option<f64>,
    pub loss_l3: Option<f64>,
    pub loss_l4: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
    /// Seconds since training started.
    pub wallclock: f64,
}

impl MetricRecord {
    /// Equality ignoring `wallclock`.
    pub fn same_metrics(&self, other: &Self) -> bool {
        Self { wallclock: 0.0, ..self.clone() } == Self { wallclock: 0.0, ..other.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Written at every evaluation point and at the end.
    Latest,
    /// Written when validation accuracy improves.
    Best,
}

pub trait TrainObserver {
    fn on_record(&mut self, record: &MetricRecord) -> Result<()>;

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint, _kind: CheckpointKind) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory and ignores checkpoints.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog(pub Vec<MetricRecord>);

impl TrainObserver for MetricsLog {
    fn on_record(&mut self, record: &MetricRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub best_val_accuracy: Option<f64>,
}

pub struct Trainer<S> {
    config: TrainConfig,
    pub model: LookBackNet<S>,
    optimizer: Adam<S>,
    sampler: EpisodeSampler,
    weights: BTreeMap<usize, f64>,
    episode: u64,
    best_val_accuracy: Option<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        check_precision::<S>(&config)?;
        let model = LookBackNet::new(model_config, config.seed)?;
        let optimizer = Adam::new(model.named_params().into_iter().map(|(_, p)| p));
        let sampler = EpisodeSampler::new(config.episode_spec, stream(config.seed, STREAM_TRAIN_EPISODES))?;
        let weights = layer_weights(model.taps(), config.weights);
        Ok(Self {
            config,
            model,
            optimizer,
            sampler,
            weights,
            episode: 0,
            best_val_accuracy: None,
        })
    }

    /// Resumes from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let config = checkpoint.meta.train.clone();
        config.validate()?;
        check_precision::<S>(&config)?;
        let model = checkpoint.model::<S>()?;
        let optimizer = checkpoint
            .optimizer(&model)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let rng = checkpoint
            .sampler_state()?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no sampler state".into()))?;
        let sampler = EpisodeSampler::restore(config.episode_spec, &rng)?;
        let weights = layer_weights(model.taps(), config.weights);
        Ok(Self {
            config,
            model,
            optimizer,
            sampler,
            weights,
            episode: checkpoint.meta.episode,
            best_val_accuracy: checkpoint.meta.best_val_accuracy,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Episodes completed so far.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate_at(self.episode)
    }

    /// Samples one episode and applies one Adam update.
    pub fn step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        let episode = self.sampler.next_episode(data.index())?;
        let batch = EpisodeBatch::<S>::from_episode(data, &episode);
        let fwd = self
            .model
            .forward(&batch, self.config.graph_settings(), &self.weights, Mode::Train)?;
        if !fwd.loss.total.is_finite() {
            return Err(Error::Divergence { episode: self.episode });
        }
        self.model.zero_grad();
        self.model.backward(&fwd, &batch.labels)?;
        let finite = self
            .model
            .named_params()
            .iter()
            .all(|(_, p)| p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            return Err(Error::Divergence { episode: self.episode });
        }
        let lr = self.learning_rate();
        self.optimizer
            .update(self.model.named_params_mut().into_iter().map(|(_, p)| p), lr);
        self.model.commit(&fwd);
        self.episode += 1;
        Ok(fwd.loss)
    }

    /// Mean query accuracy over the validation episodes (same episodes at every call).
    pub fn validate(&self, val: &Dataset) -> Result<f64> {
        let per_layer = episode_accuracies(
            &self.model,
            val,
            &self.config.eval_episode_spec,
            self.config.val_episodes,
            stream(self.config.seed, STREAM_VAL_EPISODES),
            self.config.graph_settings(),
        )?;
        Ok(mean_ci95(&per_layer[&self.model.config().head_layer()]).0)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            precision: S::PRECISION,
            model: self.model.config().clone(),
            train: self.config.clone(),
            episode: self.episode,
            adam_step: self.optimizer.step,
            best_val_accuracy: self.best_val_accuracy,
        };
        Checkpoint::from_parts(meta, &self.model, Some(&self.optimizer), Some(&self.sampler.state()))
    }

    /// Trains until `total_episodes`, reporting every episode to `observer`.
    ///
    /// On divergence the error is returned; the most recent checkpoint handed
    /// to the observer is the last good one.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut best = None;
        while self.episode < self.config.total_episodes {
            let lr = self.learning_rate();
            let loss = self.step(train)?;
            let at_eval = self.episode.is_multiple_of(self.config.eval_every) || self.episode == self.config.total_episodes;
            let val_acc = match (at_eval, val) {
                (true, Some(v)) => Some(self.validate(v)?),
                _ => None,
            };
            let record = MetricRecord {
                episode: self.episode,
                loss_total: loss.total,
                loss_l2: loss.per_layer.get(&2).copied(),
                loss_l3: loss.per_layer.get(&3).copied(),
                loss_l4: loss.per_layer.get(&4).copied(),
                lr,
                val_acc,
                wallclock: start.elapsed().as_secs_f64(),
            };
            observer.on_record(&record)?;
            if let Some(acc) = val_acc {
                if self.best_val_accuracy.is_none_or(|b| acc > b) {
                    self.best_val_accuracy = Some(acc);
                    let ck = self.checkpoint();
                    observer.on_checkpoint(&ck, CheckpointKind::Best)?;
                    best = Some(ck);
                }
            }
            if at_eval {
                observer.on_checkpoint(&self.checkpoint(), CheckpointKind::Latest)?;
            }
        }
        Ok(TrainOutcome {
            last: self.checkpoint(),
            best,
            best_val_accuracy: self.best_val_accuracy,
        })
    }
}

fn check_precision<S: Scalar>(config: &TrainConfig) -> Result<()> {
    if config.precision != S::PRECISION {
        return Err(Error::Config(format!(
            "configured precision {:?} does not match the requested element type",
            config.precision
        )));
    }
    Ok(())
}

/// Builds a trainer in the configured precision and runs it.
pub fn train(
    config: TrainConfig,
    model_config: ModelConfig,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    match config.precision {
        Precision::Single => Trainer::<f32>::new(config, model_config)?.run(train_data, val_data, observer),
        Precision::Double => Trainer::<f64>::new(config, model_config)?.run(train_data, val_data, observer),
    }
}
