use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use normcontrast::data::{generate_synthetic, load_manifest, SynthConfig};
use normcontrast::eval::read_scores_csv;
use normcontrast::{Checkpoint, Config, EncoderParams};
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "hidden_sizes=16",
    "--set",
    "embed_dim=16",
    "--set",
    "head_hidden_dim=16",
    "--set",
    "proj_dim=8",
    "--set",
    "streams=top:depth,top:ir",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normcontrast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

/// synth + train (3 epochs) + eval with fusion and threshold sweep.
fn pipeline(dir: &Path) {
    ok(dir, &with_small(&["synth", "--out", "data"]));
    ok(dir, &with_small(&["train", "--manifest", "data/manifest.tsv", "--out", "models", "--epochs", "3"]));
    ok(
        dir,
        &[
            "eval",
            "--manifest",
            "data/manifest.tsv",
            "--models",
            "models",
            "--out",
            "eval",
            "--fuse",
            "top:depth,top:ir",
            "--sweep",
        ],
    );
}

#[test]
fn synth_round_trips_through_the_manifest() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["synth", "--out", "inline"]);
    ok(dir.path(), &["synth", "--out", "binary", "--binary"]);
    let expected = generate_synthetic(&SynthConfig::default()).unwrap();
    assert_eq!(load_manifest(&dir.path().join("inline/manifest.tsv")).unwrap(), expected);
    assert_eq!(load_manifest(&dir.path().join("binary/manifest.tsv")).unwrap(), expected);
    let cfg = Config::load(&dir.path().join("inline/config.txt")).unwrap();
    assert_eq!(cfg, Config::default());
}

#[test]
fn invalid_separation_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["synth", "--out", "d", "--set", "min_separation_deg=200"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("separation"));
    assert!(!dir.path().join("d/manifest.tsv").exists());
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["synth", "--out", "d", "--set", "no_such_key=1"]).status.code(), Some(1));
    let missing = run(dir.path(), &["train", "--manifest", "missing.tsv", "--out", "m"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    ok(dir.path(), &with_small(&["synth", "--out", "d"]));
    let diverged = run(
        dir.path(),
        &with_small(&["train", "--manifest", "d/manifest.tsv", "--out", "m", "--streams", "top:depth", "--epochs", "1", "--lr0", "1e300"]),
    );
    assert_eq!(diverged.status.code(), Some(3));
    Checkpoint::read(&dir.path().join("m/model_top_depth.last_good.ckpt")).unwrap();
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "d"]));
    ok(
        dir.path(),
        &with_small(&["train", "--manifest", "d/manifest.tsv", "--out", "m", "--streams", "top:ir", "--epochs", "0", "--seed", "9"]),
    );
    let ckpt = Checkpoint::read(&dir.path().join("m/model_top_ir.ckpt")).unwrap();
    let cfg = Config::load(&dir.path().join("m/config.txt")).unwrap();
    let init = EncoderParams::init(cfg.model.dims(cfg.synth.input_dim), 9).unwrap();
    assert_eq!(ckpt.params, init);
    assert!(!dir.path().join("m/model_top_depth.ckpt").exists());
}

#[test]
fn loss_csv_has_one_row_per_batch() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "d"]));
    ok(
        dir.path(),
        &with_small(&["train", "--manifest", "d/manifest.tsv", "--out", "m", "--streams", "top:depth", "--epochs", "4"]),
    );
    let csv = fs::read_to_string(dir.path().join("m/loss_top_depth.csv")).unwrap();
    let normals = load_manifest(&dir.path().join("d/manifest.tsv"))
        .unwrap()
        .stream_view(normcontrast::StreamKey::ALL[0])
        .train
        .iter()
        .filter(|c| c.is_normal())
        .count();
    assert_eq!(csv.lines().count(), 1 + 4 * normals.div_ceil(10));
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "data/manifest.tsv",
        "models/config.txt",
        "models/model_top_depth.ckpt",
        "models/model_top_ir.ckpt",
        "models/loss_top_ir.csv",
        "eval/report.json",
        "eval/scores_fused.csv",
        "eval/thresholds_top_depth.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_writes_fused_mean_and_exhaustive_threshold_sweep() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path());
    let e = dir.path().join("eval");
    let depth = read_scores_csv(&e.join("scores_top_depth.csv")).unwrap();
    let ir = read_scores_csv(&e.join("scores_top_ir.csv")).unwrap();
    let fused = read_scores_csv(&e.join("scores_fused.csv")).unwrap();
    let by_moment: BTreeMap<_, f64> = ir.iter().map(|s| ((s.subject_id.clone(), s.frame_start), s.sim)).collect();
    assert_eq!(fused.len(), depth.len());
    for (f, d) in fused.iter().zip(&depth) {
        let other = by_moment[&(d.subject_id.clone(), d.frame_start)];
        assert_eq!(f.sim, (d.sim + other) / 2.0);
    }

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["top:depth", "top:ir", "top:depth+top:ir"]);

    // Best row of the written sweep against accuracy at every observed score.
    let sweep = fs::read_to_string(e.join("thresholds_top_depth.csv")).unwrap();
    let best: Vec<Vec<&str>> = sweep.lines().skip(1).map(|l| l.split(',').collect()).filter(|r: &Vec<&str>| r[2] == "true").collect();
    assert_eq!(best.len(), 1);
    let best_acc: f64 = best[0][1].parse().unwrap();
    let accuracy = |g: f64| {
        depth
            .iter()
            .filter(|s| (s.sim >= g) == (s.label == normcontrast::Label::Normal))
            .count() as f64
            / depth.len() as f64
    };
    let exhaustive = depth.iter().map(|s| s.sim).chain([f64::INFINITY]).map(accuracy).fold(0.0, f64::max);
    assert_eq!(best_acc, exhaustive);
    assert_eq!(report[0]["best_accuracy"].as_f64().unwrap(), exhaustive);
}

#[test]
fn stream_series_fuse_to_their_mean() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path());
    let d = dir.path();
    let subject = read_scores_csv(&d.join("eval/scores_top_depth.csv")).unwrap()[0].subject_id.clone();
    for s in ["depth", "ir"] {
        ok(
            d,
            &[
                "score-stream",
                "--scores",
                &format!("eval/scores_top_{s}.csv"),
                "--subject",
                &subject,
                "--out",
                &format!("{s}.csv"),
                "--plot",
                &format!("{s}_plot.csv"),
            ],
        );
    }
    ok(d, &["fuse", "--inputs", "depth.csv", "ir.csv", "--out", "fused.csv"]);
    let read = |f: &str| -> Vec<(u64, f64)> {
        fs::read_to_string(d.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect()
    };
    let (a, b, f) = (read("depth.csv"), read("ir.csv"), read("fused.csv"));
    assert!(!f.is_empty());
    assert!(f.iter().all(|(frame, _)| frame % 32 == 14));
    for ((x, y), z) in a.iter().zip(&b).zip(&f) {
        assert_eq!(z.1, (x.1 + y.1) / 2.0);
    }
    let plot = fs::read_to_string(d.join("depth_plot.csv")).unwrap();
    assert!(plot.starts_with("frame_index,score,label,threshold\n"));

    let mismatched = run(d, &["fuse", "--inputs", "depth.csv", "depth_plot.csv", "--out", "x.csv"]);
    assert_ne!(mismatched.status.code(), Some(0));
}

#[test]
fn sweep_reports_each_ratio() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "d"]));
    ok(
        dir.path(),
        &with_small(&["sweep", "--manifest", "d/manifest.tsv", "--out", "sweep.csv", "--epochs", "2", "--lambda", "0.2:1", "1:0.4"]),
    );
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("lambda_n,lambda_a,normal_clips,anomalous_clips,auc"));
    assert!(rows[1].starts_with("0.2,1.0,40,125,"));
    assert!(rows[2].starts_with("1.0,0.4,200,50,"));
}
