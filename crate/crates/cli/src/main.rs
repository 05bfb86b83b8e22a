//! `normcontrast`: synthesize data, train per-stream encoders, evaluate,
//! and post-process score streams.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use normcontrast::data::{generate_synthetic, load_manifest, parse_stream_keys, save_manifest, FeatureStorage};
use normcontrast::eval::{best_threshold, read_scores_csv, scores_to_csv, threshold_sweep, ClipScore};
use normcontrast::optim::history_to_csv;
use normcontrast::pipeline::{fuse_clip_scores, fused_name, lambda_sweep, reports_to_json, score_stream, subject_stream, sweep_to_csv, train_stream, StreamReport};
use normcontrast::stream::{fuse, plot_csv, smooth, ScoreSeries};
use normcontrast::{Checkpoint, Config, DatasetSplit, Error, ErrorKind, Label, StreamKey};

const MANIFEST: &str = "manifest.tsv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "normcontrast", version, about = "Contrastive normal-driving anomaly detection")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    lr0: Option<f64>,

    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Worker threads for per-batch forward and backward passes.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and write its manifest.
    Synth(SynthArgs),
    /// Train one model per stream.
    Train(TrainArgs),
    /// Score test clips, fuse streams and write reports.
    Eval(EvalArgs),
    /// Turn clip scores of one subject into a frame-indexed score series.
    ScoreStream(ScoreStreamArgs),
    /// Average aligned score series.
    Fuse(FuseArgs),
    /// Retrain under training-data ratios and report test metrics.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Store features as binary files instead of inline decimals.
    #[arg(long)]
    binary: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated stream keys; defaults to every stream in the manifest.
    #[arg(long)]
    streams: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    streams: Option<String>,
    /// Fixed decision threshold; the best-accuracy threshold otherwise.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    smooth_k: Option<usize>,
    /// Comma-separated streams to fuse.
    #[arg(long)]
    fuse: Option<String>,
    /// Also write the accuracy at every candidate threshold.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct ScoreStreamArgs {
    /// Clip score CSV written by `eval`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long)]
    out: PathBuf,
    /// Running-average window; 1 leaves the series unchanged.
    #[arg(long, default_value_t = 1)]
    smooth_k: usize,
    /// Dense per-frame CSV with labels and threshold, for plotting.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Score series CSVs (`frame_index,score`), at least two.
    #[arg(long, num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    smooth_k: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "top:depth")]
    stream: String,
    /// `λn:λa` pairs.
    #[arg(long, num_args = 1.., default_values = ["0.2:1", "0.6:1", "1:1"])]
    lambda: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Numerical) => 3,
        Some(ErrorKind::Data) | None => 2,
    }
}

fn usage(message: String) -> anyhow::Error {
    Error::InvalidArgument(message).into()
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> anyhow::Result<Config> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(p)?,
        _ => Config::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(v) = cli.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = cli.lr0 {
        cfg.train.lr0 = v;
    }
    if let Some(v) = cli.tau {
        cfg.train.tau = v;
    }
    if let Some(v) = cli.threads {
        cfg.train.threads = v;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn select_streams(dataset: &DatasetSplit, arg: Option<&str>) -> anyhow::Result<Vec<StreamKey>> {
    let present = dataset.streams();
    let Some(arg) = arg else {
        return Ok(present);
    };
    let keys = parse_stream_keys(arg)?;
    if keys.is_empty() {
        return Err(usage("no streams given".into()));
    }
    if let Some(k) = keys.iter().find(|k| !present.contains(k)) {
        return Err(usage(format!("stream {k} is not in the manifest")));
    }
    Ok(keys)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::ScoreStream(a) => cmd_score_stream(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli, None)?;
    let dataset = generate_synthetic(&cfg.synth)?;
    create_dir(&a.out)?;
    let storage = if a.binary {
        FeatureStorage::Binary(PathBuf::from("features"))
    } else {
        FeatureStorage::Inline
    };
    save_manifest(&dataset, &a.out.join(MANIFEST), &storage)?;
    write(&a.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli, None)?;
    let dataset = load_manifest(&a.manifest)?;
    let streams = select_streams(&dataset, a.streams.as_deref())?;
    create_dir(&a.out)?;
    write(&a.out.join(CONFIG_FILE), cfg.to_text())?;
    for key in streams {
        let slug = key.slug();
        let outcome = match train_stream(&cfg, &dataset, key) {
            Ok(o) => o,
            Err(Error::Diverged {
                step,
                epoch,
                message,
                last_good,
            }) => {
                let path = a.out.join(format!("model_{slug}.last_good.ckpt"));
                last_good.write(&path)?;
                eprintln!("wrote last finite parameters to {}", path.display());
                return Err(Error::Diverged {
                    step,
                    epoch,
                    message,
                    last_good,
                })
                .with_context(|| format!("training stream {key}"));
            }
            Err(e) => return Err(e).with_context(|| format!("training stream {key}")),
        };
        outcome.checkpoint.write(&a.out.join(format!("model_{slug}.ckpt")))?;
        write(&a.out.join(format!("loss_{slug}.csv")), history_to_csv(&outcome.history))?;
    }
    Ok(())
}

fn thresholds_csv(scores: &[ClipScore]) -> anyhow::Result<String> {
    let (normal, anomaly): (Vec<&ClipScore>, Vec<&ClipScore>) =
        scores.iter().partition(|s| s.label == Label::Normal);
    let normal: Vec<f64> = normal.iter().map(|s| s.sim).collect();
    let anomaly: Vec<f64> = anomaly.iter().map(|s| s.sim).collect();
    let best = best_threshold(&normal, &anomaly)?;
    let mut out = String::from("gamma,accuracy,best\n");
    for p in threshold_sweep(&normal, &anomaly)? {
        out.push_str(&format!("{},{},{}\n", p.gamma, p.accuracy, p == best));
    }
    Ok(out)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli, Some(&a.models.join(CONFIG_FILE)))?;
    if let Some(g) = a.gamma {
        cfg.eval.gamma = Some(g);
    }
    if let Some(k) = a.smooth_k {
        cfg.eval.smooth_k = k;
    }
    if let Some(f) = &a.fuse {
        cfg.eval.fuse = parse_stream_keys(f)?;
    }
    let dataset = load_manifest(&a.manifest)?;
    let mut streams = match &a.streams {
        Some(s) => select_streams(&dataset, Some(s))?,
        None => dataset
            .streams()
            .into_iter()
            .filter(|k| a.models.join(format!("model_{}.ckpt", k.slug())).exists())
            .collect(),
    };
    for k in &cfg.eval.fuse {
        if !streams.contains(k) {
            streams.push(*k);
        }
    }
    if streams.is_empty() {
        return Err(usage(format!("no model checkpoints found in {}", a.models.display())));
    }
    if cfg.eval.fuse.len() == 1 {
        return Err(usage("fusion needs at least two streams".into()));
    }
    let distinct: BTreeSet<_> = cfg.eval.fuse.iter().collect();
    if distinct.len() != cfg.eval.fuse.len() {
        return Err(usage("fusion streams must be distinct".into()));
    }

    create_dir(&a.out)?;
    let mut reports = Vec::new();
    let mut scored = Vec::new();
    for &key in &streams {
        let ckpt = Checkpoint::read(&a.models.join(format!("model_{}.ckpt", key.slug())))?;
        let scores = score_stream(&ckpt, &dataset, key, &cfg.train)
            .with_context(|| format!("scoring stream {key}"))?;
        write(&a.out.join(format!("scores_{}.csv", key.slug())), scores_to_csv(&scores)?)?;
        if a.sweep {
            write(&a.out.join(format!("thresholds_{}.csv", key.slug())), thresholds_csv(&scores)?)?;
        }
        reports.push(StreamReport::new(&key.to_string(), scores.clone(), cfg.eval.gamma, cfg.eval.smooth_k)?);
        scored.push((key, scores));
    }
    if cfg.eval.fuse.len() >= 2 {
        let sets: Vec<&[ClipScore]> = cfg
            .eval
            .fuse
            .iter()
            .map(|k| scored.iter().find(|(s, _)| s == k).map(|(_, v)| v.as_slice()).expect("fused streams are scored"))
            .collect();
        let fused = fuse_clip_scores(&sets)?;
        write(&a.out.join("scores_fused.csv"), scores_to_csv(&fused)?)?;
        if a.sweep {
            write(&a.out.join("thresholds_fused.csv"), thresholds_csv(&fused)?)?;
        }
        reports.push(StreamReport::new(&fused_name(&cfg.eval.fuse), fused, cfg.eval.gamma, cfg.eval.smooth_k)?);
    }
    write(&a.out.join("report.json"), reports_to_json(&reports)?)?;
    for r in &reports {
        println!(
            "{}\tauc {:.4}\tbest_accuracy {:.4}\tgamma {:.4}",
            r.clip.name, r.clip.auc, r.clip.best_accuracy, r.clip.gamma
        );
    }
    Ok(())
}

fn cmd_score_stream(a: &ScoreStreamArgs) -> anyhow::Result<()> {
    let scores = read_scores_csv(&a.scores)?;
    let (series, labels) = subject_stream(&scores, &a.subject)?;
    let series = smooth(&series, a.smooth_k)?;
    series.write_csv(&a.out)?;
    if let Some(plot) = &a.plot {
        let gamma = match a.gamma {
            Some(g) => g,
            None => {
                let (n, an): (Vec<&ClipScore>, Vec<&ClipScore>) =
                    scores.iter().partition(|s| s.label == Label::Normal);
                let n: Vec<f64> = n.iter().map(|s| s.sim).collect();
                let an: Vec<f64> = an.iter().map(|s| s.sim).collect();
                best_threshold(&n, &an)?.gamma
            }
        };
        write(plot, plot_csv(&series, &labels, gamma))?;
    }
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> anyhow::Result<()> {
    let series = a
        .inputs
        .iter()
        .map(|p| ScoreSeries::read_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<&ScoreSeries> = series.iter().collect();
    let fused = smooth(&fuse(&refs)?, a.smooth_k)?;
    fused.write_csv(&a.out)?;
    Ok(())
}

fn parse_lambda(s: &str) -> anyhow::Result<(f64, f64)> {
    let bad = || usage(format!("lambda {s:?} is not λn:λa"));
    let (n, an) = s.split_once(':').ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, an.trim().parse().map_err(|_| bad())?))
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli, None)?;
    let key: StreamKey = a.stream.parse()?;
    let lambdas = a.lambda.iter().map(|s| parse_lambda(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let dataset = load_manifest(&a.manifest)?;
    if !dataset.streams().contains(&key) {
        return Err(anyhow!(Error::InvalidArgument(format!("stream {key} is not in the manifest"))));
    }
    let rows = lambda_sweep(&cfg, &dataset, key, &lambdas)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&a.out, sweep_to_csv(&rows)?)?;
    Ok(())
}
