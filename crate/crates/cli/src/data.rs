use lookback::datasets::{generate_synthetic, load_image_folder, LoadOptions, Normalization, Splits};
use lookback::{Dataset, SplitManifest, SyntheticSpec};

use crate::config::{DataConfig, SyntheticSplit};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn pick(self, splits: Splits) -> Dataset {
        match self {
            SplitName::Train => splits.train,
            SplitName::Val => splits.val,
            SplitName::Test => splits.test,
        }
    }
}

pub fn load_splits(data: &DataConfig) -> Result<Splits, CliError> {
    if let Some(syn) = &data.synthetic {
        return synthetic_splits(&syn.spec, &syn.split);
    }
    let root = data
        .root
        .as_ref()
        .ok_or_else(|| CliError::config("data.root is not set (and no data.synthetic section)"))?;
    if !root.is_dir() {
        return Err(CliError::config(format!("dataset root {} does not exist", root.display())));
    }
    let manifest_path = |given: &Option<std::path::PathBuf>, name: &str| given.clone().unwrap_or_else(|| root.join(name));
    let manifest = SplitManifest::from_files(
        &manifest_path(&data.train_manifest, "train.txt"),
        &manifest_path(&data.val_manifest, "val.txt"),
        &manifest_path(&data.test_manifest, "test.txt"),
    )?;
    let opts = LoadOptions {
        target_size: (data.image_size[0], data.image_size[1]),
        channels: data.channels,
        normalization: data
            .normalization
            .clone()
            .unwrap_or_else(|| Normalization::identity(data.channels)),
    };
    Ok(load_image_folder(root, &manifest, &opts)?)
}

pub fn synthetic_splits(spec: &SyntheticSpec, split: &SyntheticSplit) -> Result<Splits, CliError> {
    let all = generate_synthetic(spec)?;
    match *split {
        SyntheticSplit::Classes([a, b, c]) => {
            if a == 0 || b == 0 || c == 0 || a + b + c > spec.n_classes {
                return Err(CliError::config(format!(
                    "class split {a}/{b}/{c} does not fit {} classes",
                    spec.n_classes
                )));
            }
            let ids: Vec<String> = (0..spec.n_classes).map(SyntheticSpec::class_id).collect();
            let pick = |r: std::ops::Range<usize>| all.subset(ids[r].iter().map(String::as_str));
            Ok(Splits {
                train: pick(0..a)?,
                val: pick(a..a + b)?,
                test: pick(a + b..a + b + c)?,
            })
        }
        SyntheticSplit::Examples([a, b, c]) => {
            if a == 0 || b == 0 || c == 0 || a + b + c > spec.examples_per_class {
                return Err(CliError::config(format!(
                    "example split {a}/{b}/{c} does not fit {} examples per class",
                    spec.examples_per_class
                )));
            }
            Ok(Splits {
                train: all.select_examples(0..a)?,
                val: all.select_examples(a..a + b)?,
                test: all.select_examples(a + b..a + b + c)?,
            })
        }
    }
}
