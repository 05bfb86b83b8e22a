//! Clip records, train/test splits and subject-fold subsetting.

mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    load_manifest, read_feature_file, save_manifest, write_feature_file, FeatureStorage,
    FEATURE_MAGIC,
};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Top,
    Front,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Ir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Top => "top",
            View::Front => "front",
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        })
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

impl FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "top" => Ok(View::Top),
            "front" => Ok(View::Front),
            _ => Err(format!("unknown view {s:?}")),
        }
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "depth" => Ok(Modality::Depth),
            "ir" => Ok(Modality::Ir),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

/// One sensor stream: a (view, modality) pair. Written `top:depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub view: View,
    pub modality: Modality,
}

impl StreamKey {
    pub const ALL: [StreamKey; 4] = [
        StreamKey::new(View::Top, Modality::Depth),
        StreamKey::new(View::Top, Modality::Ir),
        StreamKey::new(View::Front, Modality::Depth),
        StreamKey::new(View::Front, Modality::Ir),
    ];

    pub const fn new(view: View, modality: Modality) -> Self {
        StreamKey { view, modality }
    }

    /// File-name friendly form, e.g. `top_depth`.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.view, self.modality)
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.view, self.modality)
    }
}

impl FromStr for StreamKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (v, m) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("stream key {s:?} is not view:modality")))?;
        Ok(StreamKey {
            view: v.parse().map_err(Error::InvalidArgument)?,
            modality: m.parse().map_err(Error::InvalidArgument)?,
        })
    }
}

/// Parses a comma-separated list of stream keys.
pub fn parse_stream_keys(s: &str) -> Result<Vec<StreamKey>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub subject_id: String,
    pub view: View,
    pub modality: Modality,
    pub label: Label,
    /// Present iff `label` is anomalous.
    pub anomaly_class: Option<String>,
    /// Whether this clip's class occurs in the training split.
    pub seen_in_training: bool,
    pub features: Vec<f64>,
    /// Inclusive frame range in the source recording.
    pub frame_span: (u64, u64),
}

impl ClipSample {
    pub fn stream(&self) -> StreamKey {
        StreamKey::new(self.view, self.modality)
    }

    pub fn is_normal(&self) -> bool {
        self.label == Label::Normal
    }

    /// Identifies the same recording moment across streams.
    pub fn moment(&self) -> (&str, u64) {
        (&self.subject_id, self.frame_span.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

impl DatasetSplit {
    pub fn new(train: Vec<ClipSample>, test: Vec<ClipSample>) -> Result<Self> {
        let d = DatasetSplit { train, test };
        d.validate()?;
        Ok(d)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.test)
            .next()
            .map(|c| c.features.len())
    }

    pub fn is_subject_disjoint(&self) -> bool {
        let train: HashSet<&str> = self.train.iter().map(|c| c.subject_id.as_str()).collect();
        self.test.iter().all(|c| !train.contains(c.subject_id.as_str()))
    }

    /// Clips of one stream, in stored order.
    pub fn stream_view(&self, key: StreamKey) -> DatasetSplit {
        let pick = |v: &[ClipSample]| v.iter().filter(|c| c.stream() == key).cloned().collect();
        DatasetSplit {
            train: pick(&self.train),
            test: pick(&self.test),
        }
    }

    /// Streams that appear anywhere in the dataset, sorted.
    pub fn streams(&self) -> Vec<StreamKey> {
        let s: BTreeSet<StreamKey> = self.train.iter().chain(&self.test).map(ClipSample::stream).collect();
        s.into_iter().collect()
    }

    /// Checks every per-clip and split-level invariant.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() && self.test.is_empty() {
            return Err(Error::Dataset("no clips".into()));
        }
        let dim = self.feature_dim().unwrap_or(0);
        if dim == 0 {
            return Err(Error::Dataset("clips carry no features".into()));
        }
        let mut ids = HashSet::new();
        for c in self.train.iter().chain(&self.test) {
            if !ids.insert(c.clip_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate clip_id {:?}", c.clip_id)));
            }
            validate_clip(c, dim)?;
        }
        let train_subjects: HashSet<&str> =
            self.train.iter().map(|c| c.subject_id.as_str()).collect();
        if let Some(c) = self
            .test
            .iter()
            .find(|c| train_subjects.contains(c.subject_id.as_str()))
        {
            return Err(Error::SplitLeak(format!(
                "subject {:?} appears in both train and test",
                c.subject_id
            )));
        }
        if let Some(c) = self.train.iter().find(|c| !c.seen_in_training) {
            return Err(Error::SplitLeak(format!(
                "train clip {:?} is marked unseen",
                c.clip_id
            )));
        }
        let train_classes: HashSet<&str> = self
            .train
            .iter()
            .filter_map(|c| c.anomaly_class.as_deref())
            .collect();
        if let Some(c) = self.test.iter().find(|c| {
            !c.seen_in_training
                && c.anomaly_class
                    .as_deref()
                    .is_some_and(|k| train_classes.contains(k))
        }) {
            return Err(Error::SplitLeak(format!(
                "test clip {:?} is marked unseen but its class {:?} occurs in training",
                c.clip_id,
                c.anomaly_class.as_deref().unwrap_or_default()
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_clip(c: &ClipSample, dim: usize) -> Result<()> {
    if c.clip_id.is_empty() || c.subject_id.is_empty() {
        return Err(Error::Dataset("empty clip_id or subject_id".into()));
    }
    if c.features.len() != dim {
        return Err(Error::Dataset(format!(
            "clip {:?} has {} features, expected {dim}",
            c.clip_id,
            c.features.len()
        )));
    }
    if c.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!(
            "clip {:?} has non-finite features",
            c.clip_id
        )));
    }
    match (c.label, &c.anomaly_class) {
        (Label::Normal, Some(k)) => {
            return Err(Error::Dataset(format!(
                "normal clip {:?} carries anomaly class {k:?}",
                c.clip_id
            )))
        }
        (Label::Anomalous, None) => {
            return Err(Error::Dataset(format!(
                "anomalous clip {:?} has no anomaly class",
                c.clip_id
            )))
        }
        (Label::Anomalous, Some(k)) if k.is_empty() => {
            return Err(Error::Dataset(format!(
                "anomalous clip {:?} has an empty anomaly class",
                c.clip_id
            )))
        }
        _ => {}
    }
    if c.frame_span.1 < c.frame_span.0 {
        return Err(Error::Dataset(format!(
            "clip {:?} has frame span ending before it starts",
            c.clip_id
        )));
    }
    Ok(())
}

/// Number of folds retained for a ratio, e.g. 0.2 of 5 folds -> 1.
pub fn folds_retained(lambda: f64, folds: usize) -> usize {
    // Guard against 0.6 * 5 = 3.0000000000000004 rounding up to 4.
    ((lambda * folds as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Seeded assignment of training subjects to `folds` near-equal folds.
pub fn subject_folds(dataset: &DatasetSplit, folds: usize, seed: u64) -> Vec<Vec<String>> {
    let subjects: BTreeSet<&str> = dataset.train.iter().map(|c| c.subject_id.as_str()).collect();
    let mut subjects: Vec<String> = subjects.into_iter().map(str::to_owned).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let folds = folds.max(1).min(subjects.len().max(1));
    let mut out = vec![Vec::new(); folds];
    let (base, extra) = (subjects.len() / folds, subjects.len() % folds);
    let mut it = subjects.into_iter();
    for (f, fold) in out.iter_mut().enumerate() {
        let n = base + usize::from(f < extra);
        fold.extend(it.by_ref().take(n));
    }
    out
}

/// Keeps the normal clips of the first `⌈λₙ·folds⌉` subject folds and the
/// anomalous clips of the first `⌈λₐ·folds⌉`. Larger ratios retain supersets.
/// The test split is untouched.
pub fn subset(
    dataset: &DatasetSplit,
    lambda_n: f64,
    lambda_a: f64,
    folds: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    for (name, l) in [("lambda_n", lambda_n), ("lambda_a", lambda_a)] {
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie in (0, 1], got {l}"
            )));
        }
    }
    if folds == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    if lambda_n == 1.0 && lambda_a == 1.0 {
        return Ok(dataset.clone());
    }
    let fold_list = subject_folds(dataset, folds, seed);
    let fold_of: BTreeMap<&str, usize> = fold_list
        .iter()
        .enumerate()
        .flat_map(|(f, subs)| subs.iter().map(move |s| (s.as_str(), f)))
        .collect();
    let n_keep = folds_retained(lambda_n, fold_list.len());
    let a_keep = folds_retained(lambda_a, fold_list.len());
    let train = dataset
        .train
        .iter()
        .filter(|c| {
            let f = fold_of[c.subject_id.as_str()];
            if c.is_normal() {
                f < n_keep
            } else {
                f < a_keep
            }
        })
        .cloned()
        .collect();
    Ok(DatasetSplit {
        train,
        test: dataset.test.clone(),
    })
}
