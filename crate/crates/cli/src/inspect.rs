//! Plain-text dump of one episode: per layer the length scales, similarity,
//! sparsified affinity, normalized operator, initial and propagated scores,
//! class probabilities and loss. Numbers use the shortest exact decimal form,
//! so the dump can be re-checked offline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lookback::checkpoint::AnyModel;
use lookback::episodes::sample_episode;
use lookback::model::layer_weights;
use lookback::nn::Mode;
use lookback::rng::{stream, STREAM_EVAL_EPISODES};
use lookback::{Checkpoint, Episode, EpisodeBatch, LookBackNet, Precision, Scalar};
use ndarray::{Array1, Array2};

use crate::config::RunConfig;
use crate::data::{load_splits, SplitName};
use crate::{CliError, ConfigArgs};

pub fn run(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    split: SplitName,
    episode_seed: u64,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let (model, weights) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.any_model()?, ck.meta.train.weights)
        }
        None => {
            let seed = config.train.seed;
            let model = match config.train.precision {
                Precision::Single => AnyModel::Single(LookBackNet::new(config.model.clone(), seed)?),
                Precision::Double => AnyModel::Double(LookBackNet::new(config.model.clone(), seed)?),
            };
            (model, config.train.weights)
        }
    };
    let data = split.pick(load_splits(&config.data)?);
    let episode = sample_episode(
        data.index(),
        &config.eval.spec,
        &mut stream(episode_seed, STREAM_EVAL_EPISODES),
    )?;
    let text = lookback::with_model!(&model, m => dump(m, &data, &episode, &config, weights))?;
    match output {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dump<S: Scalar>(
    model: &LookBackNet<S>,
    data: &lookback::Dataset,
    episode: &Episode,
    config: &RunConfig,
    weights: [f64; 3],
) -> Result<String, CliError> {
    if model.config().input_shape != data.shape() {
        return Err(CliError::config(format!(
            "model expects {:?} images but the data section provides {:?}",
            model.config().input_shape,
            data.shape()
        )));
    }
    let batch = EpisodeBatch::<S>::from_episode(data, episode);
    let settings = config.eval.graph_settings();
    let w = layer_weights(model.taps(), weights);
    let fwd = model.forward(&batch, settings, &w, Mode::Eval)?;

    let mut out = String::new();
    let spec = &config.eval.spec;
    writeln!(out, "# episode").unwrap();
    writeln!(
        out,
        "{}-way {}-shot, {} queries per class; {} nodes, support first",
        spec.n_way,
        spec.k_shot,
        spec.q_per_class,
        batch.n_nodes()
    )
    .unwrap();
    writeln!(out, "n_support {}", batch.n_support).unwrap();
    writeln!(out, "classes {}", episode.class_map.join(" ")).unwrap();
    writeln!(out, "labels {}", join(batch.labels.iter())).unwrap();
    writeln!(out, "alpha {}", settings.alpha).unwrap();
    writeln!(out, "m {}", settings.m).unwrap();
    for (layer, state) in &fwd.layers {
        writeln!(out, "\n# layer {layer}").unwrap();
        writeln!(out, "weight {}", w.get(layer).copied().unwrap_or(0.0)).unwrap();
        vector(&mut out, "sigma", &state.sigma);
        matrix(&mut out, "S", &state.graph.similarity);
        matrix(&mut out, "W", &state.graph.graph.weights);
        matrix(&mut out, "L", &state.operator.matrix);
        matrix(&mut out, "P0", &state.initial.values);
        matrix(&mut out, "Pstar", &state.propagated.values);
        matrix(&mut out, "p", &state.probabilities.p);
        writeln!(out, "loss {}", fwd.loss.per_layer[layer]).unwrap();
    }
    writeln!(out, "\n# losses").unwrap();
    for (layer, loss) in &fwd.loss.per_layer {
        writeln!(out, "layer {layer} {loss}").unwrap();
    }
    writeln!(out, "total {}", fwd.loss.total).unwrap();
    Ok(out)
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn vector<S: Scalar>(out: &mut String, name: &str, v: &Array1<S>) {
    writeln!(out, "{name}").unwrap();
    writeln!(out, "{}", join(v.iter())).unwrap();
}

fn matrix<S: Scalar>(out: &mut String, name: &str, m: &Array2<S>) {
    writeln!(out, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.rows() {
        writeln!(out, "{}", join(row.iter())).unwrap();
    }
}
