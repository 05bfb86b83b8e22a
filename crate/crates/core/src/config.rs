//! Flat `key = value` configuration covering training, model shape,
//! synthetic data and evaluation.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Unknown
//! keys are rejected so a typo never silently falls back to a default.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{parse_stream_keys, StreamKey, SynthConfig};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::loss::Objective;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    /// Normal clips per mini-batch (K).
    pub batch_normals: usize,
    /// Anomalous clips per mini-batch (M).
    pub batch_anomalies: usize,
    pub tau: f64,
    pub seed: u64,
    pub lambda_n: f64,
    pub lambda_a: f64,
    /// Subject folds used for λ subsetting.
    pub folds: usize,
    /// Std-dev of additive Gaussian noise on training features; 0 disables.
    pub feature_noise: f64,
    pub objective: Objective,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            epochs: 250,
            lr_decay_factor: 0.1,
            lr_decay_every: 100,
            batch_normals: 10,
            batch_anomalies: 150,
            tau: 0.1,
            seed: 0,
            lambda_n: 1.0,
            lambda_a: 1.0,
            folds: 5,
            feature_noise: 0.1,
            objective: Objective::Contrastive,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive".into());
        }
        if self.objective == Objective::Contrastive && self.batch_normals < 2 {
            return bad(format!(
                "batch_normals must be at least 2, got {}",
                self.batch_normals
            ));
        }
        if self.batch_normals == 0 {
            return bad("batch_normals must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, l) in [("lambda_n", self.lambda_n), ("lambda_a", self.lambda_a)] {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {l}"));
            }
        }
        if self.folds == 0 {
            return bad("folds must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!(
                "feature_noise must be non-negative, got {}",
                self.feature_noise
            ));
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        Ok(())
    }
}

/// Encoder and projection-head widths; the input width comes from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden_dim: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_sizes: vec![512],
            embed_dim: 512,
            head_hidden_dim: 512,
            proj_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize) -> EncoderDims {
        EncoderDims::new(input_dim, self.hidden_sizes.clone(), self.embed_dim)
            .with_head(self.head_hidden_dim, self.proj_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Fixed threshold; the best-accuracy threshold is used when absent.
    pub gamma: Option<f64>,
    /// Running-average window for stream post-processing.
    pub smooth_k: usize,
    /// Streams to fuse; empty disables fusion.
    pub fuse: Vec<StreamKey>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gamma: None,
            smooth_k: 6,
            fuse: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

/// Every recognised key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "lr0",
    "momentum",
    "epochs",
    "lr_decay_factor",
    "lr_decay_every",
    "batch_normals",
    "batch_anomalies",
    "tau",
    "lambda_n",
    "lambda_a",
    "folds",
    "feature_noise",
    "objective",
    "threads",
    "hidden_sizes",
    "embed_dim",
    "head_hidden_dim",
    "proj_dim",
    "input_dim",
    "train_subjects",
    "test_subjects",
    "train_normals_per_subject",
    "train_anomalies_per_subject",
    "test_normals_per_subject",
    "test_anomalies_per_class",
    "seen_classes",
    "unseen_classes",
    "noise",
    "shared_noise",
    "subject_spread",
    "subject_style_dims",
    "min_separation_deg",
    "max_separation_deg",
    "anomaly_dims",
    "min_class_separation_deg",
    "streams",
    "gamma",
    "smooth_k",
    "fuse",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse(key, t))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, m, s, e) = (&mut self.train, &mut self.model, &mut self.synth, &mut self.eval);
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                s.seed = t.seed;
            }
            "lr0" => t.lr0 = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, value)?,
            "batch_normals" => t.batch_normals = parse(key, value)?,
            "batch_anomalies" => t.batch_anomalies = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "lambda_n" => t.lambda_n = parse(key, value)?,
            "lambda_a" => t.lambda_a = parse(key, value)?,
            "folds" => t.folds = parse(key, value)?,
            "feature_noise" => t.feature_noise = parse(key, value)?,
            "objective" => t.objective = value.parse()?,
            "threads" => t.threads = parse(key, value)?,
            "hidden_sizes" => m.hidden_sizes = parse_list(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "head_hidden_dim" => m.head_hidden_dim = parse(key, value)?,
            "proj_dim" => m.proj_dim = parse(key, value)?,
            "input_dim" => s.input_dim = parse(key, value)?,
            "train_subjects" => s.train_subjects = parse(key, value)?,
            "test_subjects" => s.test_subjects = parse(key, value)?,
            "train_normals_per_subject" => s.train_normals_per_subject = parse(key, value)?,
            "train_anomalies_per_subject" => s.train_anomalies_per_subject = parse(key, value)?,
            "test_normals_per_subject" => s.test_normals_per_subject = parse(key, value)?,
            "test_anomalies_per_class" => s.test_anomalies_per_class = parse(key, value)?,
            "seen_classes" => s.seen_classes = parse(key, value)?,
            "unseen_classes" => s.unseen_classes = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "shared_noise" => s.shared_noise = parse(key, value)?,
            "subject_spread" => s.subject_spread = parse(key, value)?,
            "subject_style_dims" => s.subject_style_dims = parse(key, value)?,
            "min_separation_deg" => s.min_separation_deg = parse(key, value)?,
            "max_separation_deg" => s.max_separation_deg = parse(key, value)?,
            "anomaly_dims" => s.anomaly_dims = parse(key, value)?,
            "min_class_separation_deg" => s.min_class_separation_deg = parse(key, value)?,
            "streams" => s.streams = parse_stream_keys(value)?,
            "gamma" => {
                e.gamma = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "smooth_k" => e.smooth_k = parse(key, value)?,
            "fuse" => e.fuse = parse_stream_keys(value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse_str(&text)
    }

    /// Renders every key; `parse_str(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (t, m, s, e) = (&self.train, &self.model, &self.synth, &self.eval);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", t.seed.to_string());
        kv("lr0", t.lr0.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("batch_normals", t.batch_normals.to_string());
        kv("batch_anomalies", t.batch_anomalies.to_string());
        kv("tau", t.tau.to_string());
        kv("lambda_n", t.lambda_n.to_string());
        kv("lambda_a", t.lambda_a.to_string());
        kv("folds", t.folds.to_string());
        kv("feature_noise", t.feature_noise.to_string());
        kv("objective", t.objective.to_string());
        kv("threads", t.threads.to_string());
        kv("hidden_sizes", join(&m.hidden_sizes));
        kv("embed_dim", m.embed_dim.to_string());
        kv("head_hidden_dim", m.head_hidden_dim.to_string());
        kv("proj_dim", m.proj_dim.to_string());
        kv("input_dim", s.input_dim.to_string());
        kv("train_subjects", s.train_subjects.to_string());
        kv("test_subjects", s.test_subjects.to_string());
        kv("train_normals_per_subject", s.train_normals_per_subject.to_string());
        kv("train_anomalies_per_subject", s.train_anomalies_per_subject.to_string());
        kv("test_normals_per_subject", s.test_normals_per_subject.to_string());
        kv("test_anomalies_per_class", s.test_anomalies_per_class.to_string());
        kv("seen_classes", s.seen_classes.to_string());
        kv("unseen_classes", s.unseen_classes.to_string());
        kv("noise", s.noise.to_string());
        kv("shared_noise", s.shared_noise.to_string());
        kv("subject_spread", s.subject_spread.to_string());
        kv("subject_style_dims", s.subject_style_dims.to_string());
        kv("min_separation_deg", s.min_separation_deg.to_string());
        kv("max_separation_deg", s.max_separation_deg.to_string());
        kv("anomaly_dims", s.anomaly_dims.to_string());
        kv("min_class_separation_deg", s.min_class_separation_deg.to_string());
        kv("streams", join(&s.streams));
        kv("gamma", e.gamma.map_or_else(|| "auto".into(), |g| g.to_string()));
        kv("smooth_k", e.smooth_k.to_string());
        kv("fuse", join(&e.fuse));
        out
    }
}
