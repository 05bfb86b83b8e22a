//! End-to-end glue: per-stream training and scoring, clip-level fusion,
//! per-subject score streams and training-data ratio sweeps.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainConfig};
use crate::data::{subset, DatasetSplit, Label, StreamKey};
use crate::error::{Error, Result};
use crate::eval::{build_template, score_clips, ClipScore, EvalReport, Scorer};
use crate::loss::Objective;
use crate::optim::{train, TrainOutcome};
use crate::stream::{assigned_offset, held_frames, metrics_from_frames, smooth, FrameMetrics, ScoreSeries, WINDOW_FRAMES};

/// Trains one model on the clips of `key`.
pub fn train_stream(cfg: &Config, dataset: &DatasetSplit, key: StreamKey) -> Result<TrainOutcome> {
    let view = dataset.stream_view(key);
    if view.train.is_empty() {
        return Err(Error::Dataset(format!("no training clips for stream {key}")));
    }
    train(&cfg.train, &cfg.model, &view)
}

/// Turns a checkpoint into a scorer. Contrastive models get a template built
/// from the normal training clips retained under the configured λ subset.
pub fn build_scorer(ckpt: &Checkpoint, stream_data: &DatasetSplit, train_cfg: &TrainConfig) -> Result<Scorer> {
    match ckpt.objective {
        Objective::Contrastive => {
            let data = subset(
                stream_data,
                train_cfg.lambda_n,
                train_cfg.lambda_a,
                train_cfg.folds,
                train_cfg.seed,
            )?;
            let template = build_template(
                &ckpt.params,
                data.train.iter().filter(|c| c.is_normal()).map(|c| c.features.as_slice()),
            )?;
            Ok(Scorer::Template {
                params: ckpt.params.clone(),
                template,
            })
        }
        Objective::CrossEntropy | Objective::WeightedCrossEntropy => Ok(Scorer::Logit {
            params: ckpt.params.clone(),
        }),
    }
}

/// Scores the test clips of one stream.
pub fn score_stream(ckpt: &Checkpoint, dataset: &DatasetSplit, key: StreamKey, train_cfg: &TrainConfig) -> Result<Vec<ClipScore>> {
    let view = dataset.stream_view(key);
    if view.test.is_empty() {
        return Err(Error::Dataset(format!("no test clips for stream {key}")));
    }
    let scorer = build_scorer(ckpt, &view, train_cfg)?;
    score_clips(&scorer, &view.test)
}

fn join_distinct<'a>(values: impl Iterator<Item = &'a str>) -> String {
    let mut seen = Vec::new();
    for v in values {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.join("+")
}

/// Per-clip decision-level fusion: the unweighted mean of the scores that
/// different streams gave to the same recorded moment, matched by
/// `(subject_id, frame_start)`. Output follows the order of the first set.
pub fn fuse_clip_scores(sets: &[&[ClipScore]]) -> Result<Vec<ClipScore>> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fusion needs at least 2 streams, got {}",
            sets.len()
        )));
    }
    let index: Vec<BTreeMap<(&str, u64), &ClipScore>> = sets
        .iter()
        .map(|set| {
            let mut m = BTreeMap::new();
            for s in set.iter() {
                if m.insert((s.subject_id.as_str(), s.frame_start), s).is_some() {
                    return Err(Error::Dataset(format!(
                        "two clips of one stream at subject {} frame {}",
                        s.subject_id, s.frame_start
                    )));
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    for (i, m) in index.iter().enumerate().skip(1) {
        if m.len() != index[0].len() || m.keys().ne(index[0].keys()) {
            return Err(Error::Dataset(format!(
                "stream {i} is not aligned with stream 0 (different clip moments)"
            )));
        }
    }
    sets[0]
        .iter()
        .map(|first| {
            let key = (first.subject_id.as_str(), first.frame_start);
            let parts: Vec<&ClipScore> = index.iter().map(|m| m[&key]).collect();
            if let Some(p) = parts.iter().find(|p| p.label != first.label) {
                return Err(Error::Dataset(format!(
                    "clips {} and {} share a moment but disagree on the label",
                    first.clip_id, p.clip_id
                )));
            }
            let sim = parts.iter().map(|p| p.sim).sum::<f64>() / parts.len() as f64;
            Ok(ClipScore {
                clip_id: format!("{}@{}", first.subject_id, first.frame_start),
                subject_id: first.subject_id.clone(),
                view: join_distinct(parts.iter().map(|p| p.view.as_str())),
                modality: join_distinct(parts.iter().map(|p| p.modality.as_str())),
                label: first.label,
                anomaly_class: first.anomaly_class.clone(),
                seen_in_training: first.seen_in_training,
                frame_start: first.frame_start,
                sim,
            })
        })
        .collect()
}

/// Name of a fused stream, e.g. `top:depth+top:ir`.
pub fn fused_name(keys: &[StreamKey]) -> String {
    keys.iter().map(StreamKey::to_string).collect::<Vec<_>>().join("+")
}

/// A subject's continuous score trace with every clip score placed on its
/// window's middle frame, plus per-frame labels covering all windows.
pub fn subject_stream(scores: &[ClipScore], subject: &str) -> Result<(ScoreSeries, Vec<Label>)> {
    let mine: Vec<&ClipScore> = scores.iter().filter(|s| s.subject_id == subject).collect();
    let end = mine
        .iter()
        .map(|s| s.frame_start + WINDOW_FRAMES)
        .max()
        .ok_or_else(|| Error::InvalidArgument(format!("no clips for subject {subject}")))?;
    let mut labels = vec![Label::Normal; end as usize];
    for s in &mine {
        let lo = s.frame_start as usize;
        labels[lo..lo + WINDOW_FRAMES as usize].fill(s.label);
    }
    let series = ScoreSeries::from_pairs(
        mine.iter()
            .map(|s| (s.frame_start + assigned_offset(), s.sim))
            .collect(),
    )?;
    Ok((series, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameLevel {
    pub raw: FrameMetrics,
    pub smoothed: FrameMetrics,
    pub smooth_k: usize,
}

/// Frame-level metrics pooled over all test subjects, before and after
/// running-average smoothing of each subject's trace.
pub fn frame_level(scores: &[ClipScore], gamma: f64, smooth_k: usize) -> Result<FrameLevel> {
    let subjects: BTreeSet<&str> = scores.iter().map(|s| s.subject_id.as_str()).collect();
    let mut raw = Vec::new();
    let mut smoothed = Vec::new();
    for subject in subjects {
        let (series, labels) = subject_stream(scores, subject)?;
        raw.extend(held_frames(&series, &labels)?);
        smoothed.extend(held_frames(&smooth(&series, smooth_k)?, &labels)?);
    }
    Ok(FrameLevel {
        raw: metrics_from_frames(&raw, gamma)?,
        smoothed: metrics_from_frames(&smoothed, gamma)?,
        smooth_k,
    })
}

/// Metrics for one named stream or fused stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamReport {
    #[serde(flatten)]
    pub clip: EvalReport,
    pub frame_level: FrameLevel,
}

impl StreamReport {
    pub fn new(name: &str, scores: Vec<ClipScore>, gamma: Option<f64>, smooth_k: usize) -> Result<Self> {
        let clip = EvalReport::from_scores(name, scores, gamma)?;
        let frame_level = frame_level(&clip.scores, clip.gamma, smooth_k)?;
        Ok(StreamReport { clip, frame_level })
    }
}

/// Pretty JSON array of reports, newline-terminated.
pub fn reports_to_json(reports: &[StreamReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(reports)?;
    s.push('\n');
    Ok(s)
}

/// Trains and evaluates every stream in `streams`, fusing `cfg.eval.fuse`
/// when it names at least two of them.
pub fn run_experiment(cfg: &Config, dataset: &DatasetSplit, streams: &[StreamKey]) -> Result<Vec<StreamReport>> {
    let mut scored = BTreeMap::new();
    let mut reports = Vec::new();
    for &key in streams {
        let outcome = train_stream(cfg, dataset, key)?;
        let scores = score_stream(&outcome.checkpoint, dataset, key, &cfg.train)?;
        reports.push(StreamReport::new(&key.to_string(), scores.clone(), cfg.eval.gamma, cfg.eval.smooth_k)?);
        scored.insert(key, scores);
    }
    if cfg.eval.fuse.len() >= 2 {
        let sets = cfg
            .eval
            .fuse
            .iter()
            .map(|k| {
                scored
                    .get(k)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::InvalidArgument(format!("fusion stream {k} was not evaluated")))
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_clip_scores(&sets)?;
        reports.push(StreamReport::new(&fused_name(&cfg.eval.fuse), fused, cfg.eval.gamma, cfg.eval.smooth_k)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_n: f64,
    pub lambda_a: f64,
    pub normal_clips: usize,
    pub anomalous_clips: usize,
    pub auc: f64,
    pub best_accuracy: f64,
    pub closed_set_specificity: Option<f64>,
    pub open_set_specificity: Option<f64>,
}

/// Retrains on nested training subsets for every `(λₙ, λₐ)` pair and
/// reports test metrics; everything else in `cfg` is held fixed.
pub fn lambda_sweep(cfg: &Config, dataset: &DatasetSplit, key: StreamKey, lambdas: &[(f64, f64)]) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&(lambda_n, lambda_a)| {
            let mut c = cfg.clone();
            c.train.lambda_n = lambda_n;
            c.train.lambda_a = lambda_a;
            let outcome = train_stream(&c, dataset, key)?;
            let scores = score_stream(&outcome.checkpoint, dataset, key, &c.train)?;
            let r = EvalReport::from_scores(key.to_string(), scores, c.eval.gamma)?;
            Ok(SweepRow {
                lambda_n,
                lambda_a,
                normal_clips: outcome.normal_count,
                anomalous_clips: outcome.anomaly_count,
                auc: r.auc,
                best_accuracy: r.best_accuracy,
                closed_set_specificity: r.closed_set_specificity,
                open_set_specificity: r.open_set_specificity,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(subject: &str, start: u64, view: &str, modality: &str, label: Label, sim: f64) -> ClipScore {
        ClipScore {
            clip_id: format!("{subject}-{start}-{view}-{modality}"),
            subject_id: subject.into(),
            view: view.into(),
            modality: modality.into(),
            label,
            anomaly_class: (label == Label::Anomalous).then(|| "x".into()),
            seen_in_training: true,
            frame_start: start,
            sim,
        }
    }

    #[test]
    fn fuse_matches_by_moment() {
        let a = vec![
            cs("s1", 0, "top", "depth", Label::Normal, 0.8),
            cs("s1", 32, "top", "depth", Label::Anomalous, 0.2),
        ];
        let b = vec![
            cs("s1", 32, "top", "ir", Label::Anomalous, 0.4),
            cs("s1", 0, "top", "ir", Label::Normal, 0.6),
        ];
        let f = fuse_clip_scores(&[&a, &b]).unwrap();
        assert_eq!(f.len(), 2);
        assert!((f[0].sim - 0.7).abs() < 1e-15);
        assert!((f[1].sim - 0.3).abs() < 1e-15);
        assert_eq!((f[0].view.as_str(), f[0].modality.as_str()), ("top", "depth+ir"));
        assert_eq!(f[0].clip_id, "s1@0");

        assert!(fuse_clip_scores(&[&a]).is_err());
        let short = vec![a[0].clone()];
        assert!(fuse_clip_scores(&[&a, &short]).is_err());
        let mut wrong = b.clone();
        wrong[0].label = Label::Normal;
        assert!(fuse_clip_scores(&[&a, &wrong]).is_err());
    }

    #[test]
    fn subject_stream_places_middle_frames() {
        let scores = vec![
            cs("s1", 32, "top", "depth", Label::Anomalous, 0.2),
            cs("s1", 0, "top", "depth", Label::Normal, 0.9),
            cs("s2", 0, "top", "depth", Label::Normal, 0.5),
        ];
        let (series, labels) = subject_stream(&scores, "s1").unwrap();
        assert_eq!(series.frames(), &[14, 46]);
        assert_eq!(series.scores(), &[0.9, 0.2]);
        assert_eq!(labels.len(), 64);
        assert_eq!(labels[31], Label::Normal);
        assert_eq!(labels[32], Label::Anomalous);
        assert!(subject_stream(&scores, "nobody").is_err());
    }

    #[test]
    fn frame_level_counts_held_frames() {
        let scores = vec![
            cs("s1", 0, "top", "depth", Label::Normal, 0.9),
            cs("s1", 32, "top", "depth", Label::Anomalous, 0.2),
        ];
        let fl = frame_level(&scores, 0.5, 1).unwrap();
        // Frames 14..=63 carry scores: 18 normal at 0.9; 32 anomalous, of
        // which 32..=45 still hold 0.9 and 46..=63 hold 0.2.
        assert_eq!(fl.raw.frames, 50);
        assert_eq!(fl.raw.accuracy, 36.0 / 50.0);
        assert_eq!(fl.raw.auc, Some(18.0 / 32.0 + 0.5 * 14.0 / 32.0));
        assert_eq!(fl.raw, fl.smoothed);
    }
}
