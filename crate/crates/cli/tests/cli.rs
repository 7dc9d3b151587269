use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lookback(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lookback"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const RUN: &str = r#"
[data]
root = "data"
image_size = [16, 16]

[model]
width = 16

[train]
total_episodes = 4
eval_every = 2
val_episodes = 3
m = 5

[train.episode_spec]
n_way = 2
k_shot = 1
q_per_class = 3

[train.eval_episode_spec]
n_way = 2
k_shot = 1
q_per_class = 3

[eval]
n_episodes = 6
m = 5

[eval.spec]
n_way = 2
k_shot = 1
q_per_class = 3

[output]
run_dir = "run"
"#;

/// Tiny class-per-folder dataset plus a matching run configuration.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = lookback(
        dir.path(),
        &[
            "synth-data", "--out", "data", "--classes", "6", "--examples", "12", "--size", "16",
            "--separation", "3", "--seed", "4", "--split", "2,2,2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(dir.path().join("run.toml"), RUN).unwrap();
    dir
}

#[test]
fn synth_data_writes_folder_layout_and_refuses_to_overwrite() {
    let dir = workspace();
    let data = dir.path().join("data");
    for split in ["train.txt", "val.txt", "test.txt"] {
        assert_eq!(fs::read_to_string(data.join(split)).unwrap().lines().count(), 2);
    }
    assert_eq!(fs::read_dir(data.join("class_000")).unwrap().count(), 12);

    let again = lookback(dir.path(), &["synth-data", "--out", "data", "--classes", "6", "--size", "16"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = lookback(
        dir.path(),
        &["synth-data", "--out", "data", "--classes", "6", "--examples", "12", "--size", "16", "--force"],
    );
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn synth_data_reports_infeasible_separation() {
    let dir = TempDir::new().unwrap();
    let o = lookback(
        dir.path(),
        &["synth-data", "--out", "d", "--classes", "4", "--size", "2", "--channels", "1", "--separation", "50"],
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("separation infeasible"));
}

#[test]
fn train_writes_artifacts_and_snapshot_round_trips() {
    let dir = workspace();
    let o = lookback(dir.path(), &["train", "-c", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.resolved.toml", "metrics.jsonl", "latest.ckpt", "best.ckpt", "final.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["episode"], 4);
    assert!(lines[1]["val_acc"].is_number());
    assert!(lines[0].get("val_acc").is_none());
    for key in ["loss_total", "loss_l2", "loss_l3", "loss_l4", "lr", "wallclock"] {
        assert!(lines[0][key].is_number(), "{key}");
    }

    // Training again from the snapshot resolves to the very same snapshot.
    let snapshot = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    let o = lookback(
        dir.path(),
        &["train", "-c", "run/config.resolved.toml", "--set", "output.run_dir=run2"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = fs::read_to_string(dir.path().join("run2/config.resolved.toml")).unwrap();
    assert_eq!(again, snapshot.replace("run_dir = \"run\"", "run_dir = \"run2\""));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let dir = workspace();
    let o = lookback(
        dir.path(),
        &["train", "-c", "run.toml", "--set", "train.alpha=0.5", "--set", "train.weights=0,0,1", "--set", "train.total_episodes=1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snapshot = fs::read_to_string(dir.path().join("run/config.resolved.toml")).unwrap();
    assert!(snapshot.contains("alpha = 0.5"));
    assert!(snapshot.contains("weights = [0.0, 0.0, 1.0]"));
}

#[test]
fn eval_prints_headline_and_writes_report() {
    let dir = workspace();
    assert_eq!(code(&lookback(dir.path(), &["train", "-c", "run.toml"])), 0);
    let o = lookback(dir.path(), &["eval", "-c", "run.toml", "--checkpoint", "run/final.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let headline = out.lines().find(|l| l.starts_with("accuracy: ")).expect("headline");
    let value = headline.trim_start_matches("accuracy: ");
    let (mean, ci) = value.split_once(" ± ").expect("mean ± ci");
    for part in [mean, ci] {
        let (_, decimals) = part.split_once('.').unwrap();
        assert_eq!(decimals.len(), 2, "{value}");
        part.parse::<f64>().unwrap();
    }
    for layer in 2..=4 {
        assert!(out.contains(&format!("layer {layer}: ")));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/eval_test.json")).unwrap()).unwrap();
    assert_eq!(report["n_episodes"], 6);
    assert_eq!(report["head_layer"], 4);
    assert_eq!(report["per_episode_accuracies"].as_array().unwrap().len(), 6);
    let m = report["mean_accuracy"].as_f64().unwrap();
    assert_eq!(format!("{:.2}", 100.0 * m), mean);

    let o = lookback(
        dir.path(),
        &["eval", "-c", "run.toml", "--checkpoint", "run/final.ckpt", "--compare", "run/final.ckpt"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("difference: 0.00 ± 0.00"), "{}", stdout(&o));
}

/// Parses the inspect dump into named scalar lists and matrices per layer.
struct Dump {
    labels: Vec<usize>,
    alpha: f64,
    layers: BTreeMap<usize, BTreeMap<String, Vec<Vec<f64>>>>,
    losses: BTreeMap<usize, f64>,
    total: f64,
}

fn parse_dump(text: &str) -> Dump {
    let mut lines = text.lines().peekable();
    let mut dump = Dump {
        labels: vec![],
        alpha: 0.0,
        layers: BTreeMap::new(),
        losses: BTreeMap::new(),
        total: f64::NAN,
    };
    let nums = |l: &str| -> Vec<f64> { l.split_whitespace().map(|v| v.parse().unwrap()).collect() };
    let mut layer = None;
    let mut in_losses = false;
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("labels"), _) => dump.labels = line[7..].split_whitespace().map(|v| v.parse().unwrap()).collect(),
            (Some("alpha"), Some(v)) => dump.alpha = v.parse().unwrap(),
            (Some("#"), Some("layer")) => {
                let l: usize = parts.next().unwrap().parse().unwrap();
                layer = Some(l);
                dump.layers.insert(l, BTreeMap::new());
            }
            (Some("#"), Some("losses")) => in_losses = true,
            (Some("sigma"), None) => {
                let v = nums(lines.next().unwrap());
                dump.layers.get_mut(&layer.unwrap()).unwrap().insert("sigma".into(), vec![v]);
            }
            (Some(name @ ("S" | "W" | "L" | "P0" | "Pstar" | "p")), Some(rows)) => {
                let rows: usize = rows.parse().unwrap();
                let m = (0..rows).map(|_| nums(lines.next().unwrap())).collect();
                dump.layers.get_mut(&layer.unwrap()).unwrap().insert(name.into(), m);
            }
            (Some("layer"), Some(l)) if in_losses => {
                dump.losses.insert(l.parse().unwrap(), parts.next().unwrap().parse().unwrap());
            }
            (Some("total"), Some(v)) => dump.total = v.parse().unwrap(),
            _ => {}
        }
    }
    dump
}

#[test]
fn inspect_dump_is_self_consistent() {
    let dir = workspace();
    let o = lookback(
        dir.path(),
        &["inspect", "-c", "run.toml", "--set", "train.precision=double", "--episode-seed", "3", "--output", "dump.txt"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump = parse_dump(&fs::read_to_string(dir.path().join("dump.txt")).unwrap());
    assert_eq!(dump.labels.len(), 8);
    assert_eq!(dump.layers.len(), 3);
    let mut total = 0.0;
    for (layer, q) in &dump.layers {
        let (l, p0, pstar, p) = (&q["L"], &q["P0"], &q["Pstar"], &q["p"]);
        let n = l.len();
        // (I − αL) P* = P⁰
        for i in 0..n {
            for c in 0..p0[0].len() {
                let lhs: f64 = pstar[i][c] - dump.alpha * (0..n).map(|k| l[i][k] * pstar[k][c]).sum::<f64>();
                assert!((lhs - p0[i][c]).abs() < 1e-9, "layer {layer} row {i}");
            }
        }
        // Recomputed cross-entropy over all nodes.
        let ce: f64 = dump.labels.iter().enumerate().map(|(i, &y)| -p[i][y].max(1e-12).ln()).sum();
        assert!((ce - dump.losses[layer]).abs() <= 1e-6 * ce.max(1.0), "layer {layer}: {ce} vs {}", dump.losses[layer]);
        total += dump.losses[layer];
        assert!(q["sigma"][0].iter().all(|&s| s > 0.0));
        for i in 0..n {
            assert_eq!(q["W"][i][i], 0.0);
            for k in 0..n {
                assert_eq!(q["W"][i][k], q["W"][k][i]);
            }
        }
    }
    assert!((total - dump.total).abs() < 1e-9);
}

#[test]
fn inspect_accepts_a_checkpoint() {
    let dir = workspace();
    assert_eq!(code(&lookback(dir.path(), &["train", "-c", "run.toml", "--set", "train.total_episodes=2"])), 0);
    let o = lookback(dir.path(), &["inspect", "-c", "run.toml", "--checkpoint", "run/final.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# layer 4"));
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = workspace();
    let o = lookback(dir.path(), &["train", "-c", "run.toml", "--set", "data.root=nowhere"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));

    let o = lookback(dir.path(), &["train", "-c", "run.toml", "--set", "train.learning_rat=0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"));

    fs::write(dir.path().join("bad.toml"), "[train]\nalpha = \"high\"\n").unwrap();
    let o = lookback(dir.path(), &["train", "-c", "bad.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));

    fs::remove_dir_all(dir.path().join("data/class_003")).unwrap();
    let o = lookback(dir.path(), &["train", "-c", "run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("class_003"), "{}", stderr(&o));
}

#[test]
fn undersized_data_exits_with_code_three() {
    let dir = workspace();
    let o = lookback(dir.path(), &["train", "-c", "run.toml", "--set", "train.episode_spec.n_way=3"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dataset too small for N-way"), "{}", stderr(&o));
    let o = lookback(dir.path(), &["train", "-c", "run.toml", "--set", "train.m=8"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("m too large"));
}

#[test]
fn version_mismatch_is_reported() {
    let dir = workspace();
    assert_eq!(code(&lookback(dir.path(), &["train", "-c", "run.toml", "--set", "train.total_episodes=2"])), 0);
    let path = dir.path().join("run/final.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    fs::write(dir.path().join("future.ckpt"), bytes).unwrap();
    let o = lookback(dir.path(), &["eval", "-c", "run.toml", "--checkpoint", "future.ckpt"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("version 7") && err.contains("version 1"), "{err}");
}

#[test]
fn single_layer_weights_match_single_layer_model() {
    let dir = workspace();
    let base = ["train", "-c", "run.toml", "--set", "train.precision=double", "--set", "train.total_episodes=3"];
    let mut a = base.to_vec();
    a.extend(["--set", "train.weights=0,0,1", "--set", "output.run_dir=full"]);
    let mut b = base.to_vec();
    b.extend(["--set", "model.taps=[4]", "--set", "output.run_dir=single"]);
    assert_eq!(code(&lookback(dir.path(), &a)), 0);
    let o = lookback(dir.path(), &b);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |d: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(dir.path().join(d).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (full, single) = (read("full"), read("single"));
    assert_eq!(full.len(), single.len());
    for (x, y) in full.iter().zip(&single) {
        for key in ["episode", "loss_total", "loss_l4", "lr", "val_acc"] {
            assert_eq!(x.get(key), y.get(key), "{key}");
        }
        assert!(y["loss_l2"].is_null());
    }
}

#[test]
fn gradcheck_passes_and_flags_bad_steps() {
    let dir = TempDir::new().unwrap();
    let o = lookback(dir.path(), &["gradcheck", "--report", "g.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert!(report["entries"].as_array().unwrap().len() >= 50);

    let o = lookback(dir.path(), &["gradcheck", "--step", "10", "--per-tensor", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gradient check failed"));
}
