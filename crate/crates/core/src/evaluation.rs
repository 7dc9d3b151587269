//! Test protocol: mean query accuracy over random episodes with a 95%
//! confidence interval, per-layer probing and paired comparisons.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::AnyModel;
use crate::datasets::Dataset;
use crate::episodes::{EpisodeSampler, EpisodeSpec};
use crate::error::Result;
use crate::model::{EpisodeBatch, GraphSettings, LookBackNet};
use crate::rng::{stream, STREAM_EVAL_EPISODES};
use crate::scalar::Scalar;

fn default_n_episodes() -> usize {
    600
}
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_n_episodes")]
    pub n_episodes: usize,
    #[serde(default = "default_spec")]
    pub spec: EpisodeSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_m")]
    pub m: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: default_n_episodes(),
            spec: default_spec(),
            seed: 0,
            alpha: default_alpha(),
            m: default_m(),
        }
    }
}

impl EvalConfig {
    pub fn graph_settings(&self) -> GraphSettings {
        GraphSettings {
            alpha: self.alpha,
            m: self.m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, ci95) = mean_ci95(values);
        Self { mean, ci95 }
    }

    /// `xx.xx ± x.xx` in percent.
    pub fn percent(&self) -> String {
        format_percent(self.mean, self.ci95)
    }
}

/// Mean and `1.96 · s / √n` with the sample standard deviation `s`
/// (taken as 0 for a single value).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn format_percent(mean: f64, ci95: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * ci95)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// Layer whose predictions give the headline numbers.
    pub head_layer: usize,
    pub per_layer_accuracy: BTreeMap<usize, Summary>,
    pub per_episode_accuracies: Vec<f64>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn headline(&self) -> String {
        format_percent(self.mean_accuracy, self.ci95)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-layer, per-episode query accuracies.
pub fn episode_accuracies<S: Scalar>(
    model: &LookBackNet<S>,
    data: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    rng: ChaCha8Rng,
    settings: GraphSettings,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut sampler = EpisodeSampler::new(*spec, rng)?;
    let mut out: BTreeMap<usize, Vec<f64>> = model.taps().iter().map(|&l| (l, Vec::with_capacity(n_episodes))).collect();
    for _ in 0..n_episodes {
        let episode = sampler.next_episode(data.index())?;
        let batch = EpisodeBatch::<S>::from_episode(data, &episode);
        let truth = batch.query_labels();
        for (layer, pred) in model.predict_layers(&batch, settings)? {
            let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            out.get_mut(&layer)
                .expect("tap layer")
                .push(correct as f64 / truth.len() as f64);
        }
    }
    Ok(out)
}

/// Runs the protocol on `config.n_episodes` episodes drawn from `config.seed`.
/// Parameters and running statistics are left untouched.
pub fn evaluate<S: Scalar>(model: &LookBackNet<S>, data: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    let per_layer = episode_accuracies(
        model,
        data,
        &config.spec,
        config.n_episodes,
        stream(config.seed, STREAM_EVAL_EPISODES),
        config.graph_settings(),
    )?;
    let head_layer = model.config().head_layer();
    let per_layer_accuracy: BTreeMap<usize, Summary> = per_layer.iter().map(|(&l, v)| (l, Summary::of(v))).collect();
    let head = per_layer_accuracy[&head_layer];
    Ok(EvalReport {
        n_episodes: config.n_episodes,
        mean_accuracy: head.mean,
        ci95: head.ci95,
        head_layer,
        per_layer_accuracy,
        per_episode_accuracies: per_layer[&head_layer].clone(),
        config: config.clone(),
    })
}

pub fn evaluate_any(model: &AnyModel, data: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    crate::with_model!(model, m => evaluate(m, data, config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub n_episodes: usize,
    pub a: Summary,
    pub b: Summary,
    /// Mean and CI of the per-episode differences `a − b`.
    pub difference: Summary,
    /// CI of `a − b` if the two runs were treated as independent.
    pub unpaired_ci95: f64,
    pub config: EvalConfig,
}

/// Evaluates two models on the identical episode sequence.
pub fn compare(a: &AnyModel, b: &AnyModel, data: &Dataset, config: &EvalConfig) -> Result<PairedReport> {
    let ra = evaluate_any(a, data, config)?;
    let rb = evaluate_any(b, data, config)?;
    let diffs: Vec<f64> = ra
        .per_episode_accuracies
        .iter()
        .zip(&rb.per_episode_accuracies)
        .map(|(x, y)| x - y)
        .collect();
    Ok(PairedReport {
        n_episodes: config.n_episodes,
        a: Summary::of(&ra.per_episode_accuracies),
        b: Summary::of(&rb.per_episode_accuracies),
        difference: Summary::of(&diffs),
        unpaired_ci95: (ra.ci95.powi(2) + rb.ci95.powi(2)).sqrt(),
        config: config.clone(),
    })
}
