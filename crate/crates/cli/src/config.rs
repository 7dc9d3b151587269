//! Run configuration: a TOML file plus `--set section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use lookback::datasets::{Normalization, SyntheticSpec};
use lookback::evaluation::EvalConfig;
use lookback::model::ModelConfig;
use lookback::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

fn default_image_size() -> [usize; 2] {
    [84, 84]
}
fn default_channels() -> usize {
    3
}
fn default_run_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// How a generated dataset is divided into train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticSplit {
    /// Class counts, taken in class order.
    Classes([usize; 3]),
    /// Example counts per class, taken in order; every split sees every class.
    Examples([usize; 3]),
}

/// Generate the dataset in memory instead of reading a folder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub split: SyntheticSplit,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Folder with one sub-directory per class.
    pub root: Option<PathBuf>,
    /// Class lists; default to `train.txt`, `val.txt`, `test.txt` under `root`.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// `[H, W]` images are resized to.
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Per-channel mean and std; identity when absent.
    pub normalization: Option<Normalization>,
    pub synthetic: Option<SyntheticData>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            image_size: default_image_size(),
            channels: default_channels(),
            normalization: None,
            synthetic: None,
        }
    }
}

impl DataConfig {
    /// `[C, H, W]` of the images this section produces.
    pub fn input_shape(&self) -> [usize; 3] {
        match &self.synthetic {
            Some(s) => s.spec.image_size,
            None => [self.channels, self.image_size[0], self.image_size[1]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: default_run_dir(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides in order and validates.
    /// `model.input_shape` follows the data section unless set explicitly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        // Parse the file on its own first so diagnostics carry its line numbers.
        let from_file: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        let raw: Table = text.parse().map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        let explicit_shape = raw
            .get("model")
            .and_then(Value::as_table)
            .is_some_and(|m| m.contains_key("input_shape"))
            || overrides.iter().any(|o| o.trim_start().starts_with("model.input_shape"));
        // Overrides apply on top of the defaults, so a single nested key can be
        // changed without spelling out its whole section.
        let mut table = Table::try_from(&from_file)
            .map_err(|e| CliError::runtime(format!("cannot serialize config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("after overrides: {e}")))?;
        let data_shape = config.data.input_shape();
        if explicit_shape && config.model.input_shape != data_shape {
            return Err(CliError::config(format!(
                "model.input_shape {:?} does not match the data section ({:?})",
                config.model.input_shape, data_shape
            )));
        }
        config.model.input_shape = data_shape;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.spec.validate()?;
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(CliError::config(format!("eval.alpha must lie in (0, 1), got {}", self.eval.alpha)));
        }
        if self.eval.n_episodes == 0 {
            return Err(CliError::config("eval.n_episodes must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::runtime(format!("cannot serialize config: {e}")))
    }
}

/// `a.b.c=value`. The value is read as a TOML literal when possible,
/// a comma-separated list becomes an array, anything else a string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("override `{spec}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for (i, k) in parents.iter().enumerate() {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::config(format!("override `{spec}`: `{}` is not a section", keys[..=i].join(".")))
        })?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    if let Ok(mut t) = format!("v = {raw}").parse::<Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}
