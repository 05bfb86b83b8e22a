//! Continuous-stream scoring: clip windows, decision-level fusion, running
//! average smoothing and frame-level metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::data::{Label, StreamKey};
use crate::error::{Error, Result};
use crate::eval::{auc, classify};

/// Frames per recorded clip window.
pub const WINDOW_FRAMES: u64 = 32;
/// Temporal subsampling stride inside a window (32 -> 16 frames).
pub const SUBSAMPLE_STRIDE: u64 = 2;
/// 1-based position within the subsampled clip that receives the score.
pub const ASSIGNED_POSITION: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipWindow {
    pub start: u64,
    /// Inclusive.
    pub end: u64,
    /// Frame index that receives the clip's score.
    pub assigned: u64,
}

/// Frame offset inside a window that receives the clip score (14).
pub const fn assigned_offset() -> u64 {
    (ASSIGNED_POSITION - 1) * SUBSAMPLE_STRIDE
}

/// Non-overlapping 32-frame windows; a trailing partial window is dropped.
pub fn window_clips(frame_count: u64) -> Result<Vec<ClipWindow>> {
    if frame_count < WINDOW_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "stream of {frame_count} frames is shorter than one {WINDOW_FRAMES}-frame window"
        )));
    }
    Ok((0..frame_count / WINDOW_FRAMES)
        .map(|w| {
            let start = w * WINDOW_FRAMES;
            ClipWindow {
                start,
                end: start + WINDOW_FRAMES - 1,
                assigned: start + assigned_offset(),
            }
        })
        .collect())
}

/// Scores at strictly increasing frame indices for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    frames: Vec<u64>,
    scores: Vec<f64>,
    pub frame_rate: Option<f64>,
}

impl ScoreSeries {
    pub fn new(frames: Vec<u64>, scores: Vec<f64>) -> Result<Self> {
        if frames.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                context: "score series",
                expected: frames.len(),
                found: scores.len(),
            });
        }
        if let Some(w) = frames.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "frame indices must strictly increase ({} then {})",
                w[0], w[1]
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score series".into()));
        }
        Ok(ScoreSeries {
            frames,
            scores,
            frame_rate: None,
        })
    }

    /// From `(frame, score)` pairs in any order.
    pub fn from_pairs(mut pairs: Vec<(u64, f64)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        let (frames, scores) = pairs.into_iter().unzip();
        Self::new(frames, scores)
    }

    pub fn frames(&self) -> &[u64] {
        &self.frames
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Score per frame in `0..frame_count`, each frame holding the most recent
    /// score at or before it. Frames before the first score are `None`.
    pub fn hold(&self, frame_count: u64) -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(frame_count as usize);
        let mut next = 0;
        let mut current = None;
        for f in 0..frame_count {
            while next < self.frames.len() && self.frames[next] <= f {
                current = Some(self.scores[next]);
                next += 1;
            }
            out.push(current);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,score\n");
        for (f, s) in self.frames.iter().zip(&self.scores) {
            writeln!(out, "{f},{s}").unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            frame_index: u64,
            score: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut frames = Vec::new();
        let mut scores = Vec::new();
        for r in rdr.deserialize() {
            let row: Row = r?;
            frames.push(row.frame_index);
            scores.push(row.score);
        }
        Self::new(frames, scores)
    }
}

/// Aligned series keyed by stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamSet {
    pub series: BTreeMap<StreamKey, ScoreSeries>,
}

impl StreamSet {
    pub fn insert(&mut self, key: StreamKey, series: ScoreSeries) {
        self.series.insert(key, series);
    }

    /// Fuses the selected streams; see [`fuse`].
    pub fn fuse(&self, keys: &[StreamKey]) -> Result<ScoreSeries> {
        let selected = keys
            .iter()
            .map(|k| {
                self.series
                    .get(k)
                    .ok_or_else(|| Error::InvalidArgument(format!("stream {k} not present")))
            })
            .collect::<Result<Vec<_>>>()?;
        fuse(&selected)
    }
}

/// Unweighted per-frame mean of two or more aligned series.
pub fn fuse(series: &[&ScoreSeries]) -> Result<ScoreSeries> {
    if series.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fusion needs at least 2 series, got {}",
            series.len()
        )));
    }
    let first = series[0];
    if let Some(s) = series.iter().find(|s| s.frames != first.frames) {
        return Err(Error::InvalidArgument(format!(
            "series are not aligned ({} vs {} frames, or differing indices)",
            first.len(),
            s.len()
        )));
    }
    let n = series.len() as f64;
    let scores = (0..first.len())
        .map(|i| series.iter().map(|s| s.scores[i]).sum::<f64>() / n)
        .collect();
    Ok(ScoreSeries {
        frames: first.frames.clone(),
        scores,
        frame_rate: first.frame_rate,
    })
}

/// Running mean over the last `k` positions; the window shrinks at the start.
pub fn smooth(series: &ScoreSeries, k: usize) -> Result<ScoreSeries> {
    if k < 1 {
        return Err(Error::InvalidArgument("smoothing window must be >= 1".into()));
    }
    let s = &series.scores;
    let scores = (0..s.len())
        .map(|t| {
            let w = &s[(t + 1).saturating_sub(k)..=t];
            let (lo, hi) = w
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            // Rounding can push the mean a ulp outside the window range.
            (w.iter().sum::<f64>() / w.len() as f64).clamp(lo, hi)
        })
        .collect();
    Ok(ScoreSeries {
        frames: series.frames.clone(),
        scores,
        frame_rate: series.frame_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FrameMetrics {
    /// Frames that carried a (held) score.
    pub frames: usize,
    pub accuracy: f64,
    /// `None` when only one class occurs among the scored frames.
    pub auc: Option<f64>,
}

/// `(score, label)` for every frame that carries a held score.
/// `frame_labels[f]` labels frame `f`; frames between scores hold the
/// preceding score and frames before the first score are skipped.
pub fn held_frames(series: &ScoreSeries, frame_labels: &[Label]) -> Result<Vec<(f64, Label)>> {
    match series.frames.last() {
        None => return Err(Error::InvalidArgument("empty score series".into())),
        Some(&last) if last as usize >= frame_labels.len() => {
            return Err(Error::InvalidArgument(format!(
                "score at frame {last} but only {} frame labels",
                frame_labels.len()
            )))
        }
        Some(_) => {}
    }
    Ok(series
        .hold(frame_labels.len() as u64)
        .into_iter()
        .zip(frame_labels)
        .filter_map(|(s, &l)| s.map(|s| (s, l)))
        .collect())
}

/// Accuracy at `gamma` and AUC over scored frames, possibly pooled from
/// several streams.
pub fn metrics_from_frames(frames: &[(f64, Label)], gamma: f64) -> Result<FrameMetrics> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no scored frames".into()));
    }
    let correct = frames.iter().filter(|&&(s, l)| classify(s, gamma) == l).count();
    let (normal, anomaly): (Vec<&(f64, Label)>, Vec<_>) =
        frames.iter().partition(|f| f.1 == Label::Normal);
    let normal: Vec<f64> = normal.into_iter().map(|f| f.0).collect();
    let anomaly: Vec<f64> = anomaly.into_iter().map(|f| f.0).collect();
    let auc = if normal.is_empty() || anomaly.is_empty() {
        None
    } else {
        Some(auc(&normal, &anomaly)?)
    };
    Ok(FrameMetrics {
        frames: frames.len(),
        accuracy: correct as f64 / frames.len() as f64,
        auc,
    })
}

/// Frame-level accuracy and AUC of one stream; see [`held_frames`].
pub fn frame_metrics(series: &ScoreSeries, frame_labels: &[Label], gamma: f64) -> Result<FrameMetrics> {
    metrics_from_frames(&held_frames(series, frame_labels)?, gamma)
}

/// Dense `frame_index,score,label,threshold` rows for plotting; frames
/// without a held score are omitted.
pub fn plot_csv(series: &ScoreSeries, frame_labels: &[Label], gamma: f64) -> String {
    let mut out = String::from("frame_index,score,label,threshold\n");
    for (f, (score, label)) in series
        .hold(frame_labels.len() as u64)
        .into_iter()
        .zip(frame_labels)
        .enumerate()
    {
        if let Some(s) = score {
            writeln!(out, "{f},{s},{label},{gamma}").unwrap();
        }
    }
    out
}
