use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use lookback::checkpoint::AnyModel;
use lookback::datasets::{export_image_folder, generate_synthetic, write_manifest};
use lookback::evaluation::{compare, evaluate_any, format_percent};
use lookback::gradcheck::{gradcheck_report, step_sweep, GradcheckConfig};
use lookback::training::{CheckpointKind, TrainObserver, Trainer};
use lookback::{Checkpoint, Dataset, Error, MetricRecord, ModelConfig, Precision, SyntheticSpec};

use crate::config::RunConfig;
use crate::data::{load_splits, SplitName};
use crate::{CliError, ConfigArgs};

/// Streams metrics to `metrics.jsonl` and checkpoints into the run directory.
struct RunObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
    total: u64,
}

impl TrainObserver for RunObserver {
    fn on_record(&mut self, record: &MetricRecord) -> lookback::Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        if let Some(acc) = record.val_acc {
            self.metrics.flush()?;
            println!(
                "episode {}/{}  loss {:.4}  lr {:.3e}  val {:.2}%",
                record.episode,
                self.total,
                record.loss_total,
                record.lr,
                100.0 * acc
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint, kind: CheckpointKind) -> lookback::Result<()> {
        let name = match kind {
            CheckpointKind::Latest => "latest.ckpt",
            CheckpointKind::Best => "best.ckpt",
        };
        checkpoint.save(&self.dir.join(name))
    }
}

fn check_input_shape(model: &ModelConfig, data: &Dataset) -> Result<(), CliError> {
    if model.input_shape != data.shape() {
        return Err(CliError::config(format!(
            "checkpoint expects {:?} images but the data section provides {:?}",
            model.input_shape,
            data.shape()
        )));
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, resume: Option<&Path>) -> Result<(), CliError> {
    let mut config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        // The checkpoint's own settings win so the continued run is the same run.
        if ck.meta.train != config.train || ck.meta.model != config.model {
            eprintln!("note: using the model and train settings stored in the checkpoint");
        }
        config.train = ck.meta.train.clone();
        config.model = ck.meta.model.clone();
    }
    let splits = load_splits(&config.data)?;
    check_input_shape(&config.model, &splits.train)?;
    let dir = config.output.run_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved.toml"), config.to_toml()?)?;
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed.is_some())
        .truncate(resumed.is_none())
        .open(dir.join("metrics.jsonl"))?;
    let mut observer = RunObserver {
        dir: dir.clone(),
        metrics: BufWriter::new(metrics),
        total: config.train.total_episodes,
    };
    let val = Some(&splits.val);
    let outcome = match &resumed {
        Some(ck) => match ck.meta.precision {
            Precision::Single => Trainer::<f32>::resume(ck).and_then(|mut t| t.run(&splits.train, val, &mut observer)),
            Precision::Double => Trainer::<f64>::resume(ck).and_then(|mut t| t.run(&splits.train, val, &mut observer)),
        },
        None => lookback::training::train(config.train.clone(), config.model.clone(), &splits.train, val, &mut observer),
    };
    observer.metrics.flush()?;
    match outcome {
        Ok(out) => {
            out.last.save(&dir.join("final.ckpt"))?;
            match out.best_val_accuracy {
                Some(acc) => println!("best validation accuracy {:.2}%", 100.0 * acc),
                None => println!("no validation points were reached"),
            }
            println!("run directory: {}", dir.display());
            Ok(())
        }
        Err(e @ Error::Divergence { .. }) => {
            let latest = dir.join("latest.ckpt");
            let hint = if latest.exists() {
                format!("; last good checkpoint: {}", latest.display())
            } else {
                String::new()
            };
            Err(CliError::runtime(format!("{e}{hint}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn precision_name(model: &AnyModel) -> &'static str {
    match model {
        AnyModel::Single(_) => "single",
        AnyModel::Double(_) => "double",
    }
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    split: SplitName,
    other: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.any_model()?;
    let data = split.pick(load_splits(&config.data)?);
    check_input_shape(&ck.meta.model, &data)?;
    let spec = &config.eval.spec;
    println!(
        "{} (episode {}, {} precision)",
        checkpoint.display(),
        ck.meta.episode,
        precision_name(&model)
    );
    println!(
        "{} episodes of {}-way {}-shot, {} queries per class, {} split",
        config.eval.n_episodes,
        spec.n_way,
        spec.k_shot,
        spec.q_per_class,
        split.name()
    );
    let result = evaluate_any(&model, &data, &config.eval)?;
    for (layer, s) in &result.per_layer_accuracy {
        let head = if *layer == result.head_layer { "  (prediction layer)" } else { "" };
        println!("layer {layer}: {}{head}", s.percent());
    }
    println!("accuracy: {}", result.headline());
    let path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_file_name(format!("eval_{}.json", split.name())));
    fs::write(&path, result.to_json()?)?;
    println!("report: {}", path.display());

    if let Some(other_path) = other {
        let other_ck = Checkpoint::load(other_path)?;
        check_input_shape(&other_ck.meta.model, &data)?;
        let paired = compare(&model, &other_ck.any_model()?, &data, &config.eval)?;
        println!("compared with {}", other_path.display());
        println!("  this:  {}", paired.a.percent());
        println!("  other: {}", paired.b.percent());
        println!(
            "  difference: {} (paired), ± {:.2} if unpaired",
            format_percent(paired.difference.mean, paired.difference.ci95),
            100.0 * paired.unpaired_ci95
        );
        let cpath = path.with_extension("compare.json");
        fs::write(&cpath, serde_json::to_string_pretty(&paired).map_err(Error::from)?)?;
        println!("comparison: {}", cpath.display());
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Target directory; receives one folder per class and train/val/test.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub examples: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Minimum Euclidean pixel distance between class prototypes.
    #[arg(long, default_value_t = 5.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train/val/test class counts, e.g. `4,2,2` (default: half, a quarter, a quarter).
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn synth_data(args: &SynthArgs) -> Result<(), CliError> {
    let non_empty = args.out.is_dir() && fs::read_dir(&args.out)?.next().is_some();
    if args.out.exists() && !args.out.is_dir() {
        return Err(CliError::config(format!("{} exists and is not a directory", args.out.display())));
    }
    if non_empty && !args.force {
        return Err(CliError::config(format!(
            "refusing to write into non-empty directory {} (pass --force)",
            args.out.display()
        )));
    }
    let split = match &args.split {
        Some(s) if s.len() == 3 => [s[0], s[1], s[2]],
        Some(s) => return Err(CliError::config(format!("--split needs three counts, got {}", s.len()))),
        None => {
            let quarter = args.classes / 4;
            [args.classes - 2 * quarter, quarter, quarter]
        }
    };
    if split.contains(&0) || split.iter().sum::<usize>() > args.classes {
        return Err(CliError::config(format!(
            "class split {}/{}/{} does not fit {} classes",
            split[0], split[1], split[2], args.classes
        )));
    }
    let spec = SyntheticSpec {
        n_classes: args.classes,
        examples_per_class: args.examples,
        image_size: [args.channels, args.size, args.size],
        class_separation: args.separation,
        noise_scale: args.noise,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out)?;
    export_image_folder(&dataset, &args.out)?;
    let ids: Vec<String> = (0..args.classes).map(SyntheticSpec::class_id).collect();
    let (a, b, c) = (split[0], split[1], split[2]);
    write_manifest(&args.out.join("train.txt"), &ids[..a])?;
    write_manifest(&args.out.join("val.txt"), &ids[a..a + b])?;
    write_manifest(&args.out.join("test.txt"), &ids[a + b..a + b + c])?;
    println!(
        "wrote {} classes × {} images ({}×{}×{}) to {}; split {a}/{b}/{c}",
        args.classes,
        args.examples,
        args.channels,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Entries sampled from each parameter tensor.
    #[arg(long)]
    pub per_tensor: Option<usize>,
    /// Neighbours kept per node in the graph.
    #[arg(long)]
    pub m: Option<usize>,
    /// Also report the maximum error for each step in `--steps`.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-5,1e-6")]
    pub steps: Vec<f64>,
    /// Write the full per-entry report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut config = GradcheckConfig {
        seed: args.seed,
        ..Default::default()
    };
    if let Some(h) = args.step {
        config.step = h;
    }
    if let Some(t) = args.tolerance {
        config.tolerance = t;
    }
    if let Some(k) = args.per_tensor {
        config.per_tensor = k;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if !(config.step > 0.0) || !(config.tolerance > 0.0) || config.per_tensor == 0 {
        return Err(CliError::config("step, tolerance and per-tensor must be positive"));
    }
    let report = gradcheck_report(&config)?;
    let tensors: std::collections::BTreeSet<&str> = report.entries.iter().map(|e| e.param.as_str()).collect();
    println!(
        "{} entries over {} tensors, step {:e}: max relative error {:.3e} (tolerance {:e})",
        report.entries.len(),
        tensors.len(),
        report.step,
        report.max_rel_error,
        report.tolerance
    );
    let mut worst: Vec<_> = report.entries.iter().collect();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    for e in worst.iter().take(5) {
        println!(
            "  {}[{}]  analytic {:+.6e}  numeric {:+.6e}  rel {:.2e}",
            e.param, e.index, e.analytic, e.numeric, e.rel_error
        );
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    if args.sweep {
        println!("step sweep:");
        for (h, err) in step_sweep(&config, &args.steps)? {
            println!("  step {h:e}: max relative error {err:.3e}");
        }
    }
    let passed = report.passed();
    println!("{}", if passed { "PASS" } else { "FAIL" });
    report.into_result()?;
    Ok(())
}
