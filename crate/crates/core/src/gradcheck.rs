//! Finite-difference verification of the analytic gradients on a miniature
//! episode in double precision.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_weights, EpisodeBatch, GraphSettings, LookBackNet, ModelConfig};
use crate::nn::{Mode, Parameters};
use crate::rng::stream;
use crate::episodes::EpisodeSpec;

const STREAM_GRADCHECK: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub spec: EpisodeSpec,
    pub alpha: f64,
    pub m: usize,
    pub weights: [f64; 3],
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled from every parameter tensor.
    pub per_tensor: usize,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                input_shape: [3, 8, 8],
                ..ModelConfig::default()
            },
            spec: EpisodeSpec {
                n_way: 2,
                k_shot: 1,
                q_per_class: 1,
            },
            alpha: 0.99,
            m: 3,
            weights: [1.0; 3],
            step: 1e-5,
            tolerance: 1e-4,
            per_tensor: 2,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub step: f64,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn offending(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !(e.rel_error <= self.tolerance))
            .map(|e| format!("{}[{}]", e.param, e.index))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Turns a failing report into [`Error::GradCheck`].
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                max_rel_error: self.max_rel_error,
                tolerance: self.tolerance,
                offending: self.offending(),
            })
        }
    }
}

/// The miniature problem: a fresh network and one random episode in node order.
pub struct GradcheckInstance {
    pub model: LookBackNet<f64>,
    pub batch: EpisodeBatch<f64>,
    pub settings: GraphSettings,
    pub weights: BTreeMap<usize, f64>,
}

impl GradcheckInstance {
    pub fn new(config: &GradcheckConfig) -> Result<Self> {
        config.spec.validate()?;
        let model = LookBackNet::<f64>::new(config.model.clone(), config.seed)?;
        let mut rng = stream(config.seed, STREAM_GRADCHECK);
        let [c, h, w] = config.model.input_shape;
        let spec = config.spec;
        let n = spec.n_nodes();
        let images = Array4::from_shape_simple_fn((n, c, h, w), || rng.random::<f64>());
        let support = (0..spec.n_way).flat_map(|class| std::iter::repeat_n(class, spec.k_shot));
        let query = (0..spec.n_way).flat_map(|class| std::iter::repeat_n(class, spec.q_per_class));
        let batch = EpisodeBatch {
            images,
            labels: support.chain(query).collect(),
            n_support: spec.support_len(),
            n_way: spec.n_way,
        };
        let weights = layer_weights(model.taps(), config.weights);
        Ok(Self {
            model,
            batch,
            settings: GraphSettings {
                alpha: config.alpha,
                m: config.m,
            },
            weights,
        })
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(self
            .model
            .forward(&self.batch, self.settings, &self.weights, Mode::Train)?
            .loss
            .total)
    }

    /// Analytic gradients, by parameter name.
    pub fn analytic(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let fwd = self
            .model
            .forward(&self.batch, self.settings, &self.weights, Mode::Train)?;
        self.model.zero_grad();
        self.model.backward(&fwd, &self.batch.labels)?;
        Ok(self
            .model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect())
    }

    /// Central difference of the loss with respect to one parameter entry.
    pub fn numeric(&mut self, param: &str, index: usize, step: f64) -> Result<f64> {
        let original = self.entry(param, index);
        self.set_entry(param, index, original + step);
        let plus = self.loss()?;
        self.set_entry(param, index, original - step);
        let minus = self.loss()?;
        self.set_entry(param, index, original);
        Ok((plus - minus) / (2.0 * step))
    }

    fn entry(&self, param: &str, index: usize) -> f64 {
        let params = self.model.named_params();
        let p = params.iter().find(|(n, _)| n == param).expect("known parameter");
        *p.1.value.iter().nth(index).expect("index in range")
    }

    fn set_entry(&mut self, param: &str, index: usize, v: f64) {
        let mut params = self.model.named_params_mut();
        let p = params.iter_mut().find(|(n, _)| n == param).expect("known parameter");
        *p.1.value.iter_mut().nth(index).expect("index in range") = v;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients on `per_tensor` random entries of
/// every parameter tensor. Does not fail on large errors; see
/// [`GradcheckReport::into_result`].
pub fn gradcheck_report(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut inst = GradcheckInstance::new(config)?;
    let loss = inst.loss()?;
    let grads = inst.analytic()?;
    let mut pick = stream(config.seed, STREAM_GRADCHECK + 1);
    let names: Vec<(String, usize)> = inst.model.named_params().into_iter().map(|(n, p)| (n, p.len())).collect();
    let mut entries = Vec::new();
    for (name, len) in names {
        let k = config.per_tensor.min(len);
        let mut idx = sample(&mut pick, len, k).into_vec();
        idx.sort_unstable();
        for index in idx {
            let analytic = *grads[&name].iter().nth(index).expect("index in range");
            let numeric = inst.numeric(&name, index, config.step)?;
            entries.push(GradEntry {
                rel_error: relative_error(analytic, numeric, config.abs_floor),
                param: name.clone(),
                index,
                analytic,
                numeric,
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        entries,
        max_rel_error,
        tolerance: config.tolerance,
        step: config.step,
        loss,
    })
}

/// [`gradcheck_report`], failing with the offending parameters when any
/// relative error exceeds the tolerance.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_report(config)?.into_result()
}

/// Maximum relative error for each finite-difference step.
pub fn step_sweep(config: &GradcheckConfig, steps: &[f64]) -> Result<Vec<(f64, f64)>> {
    steps
        .iter()
        .map(|&step| {
            let r = gradcheck_report(&GradcheckConfig { step, ..config.clone() })?;
            Ok((step, r.max_rel_error))
        })
        .collect()
}
