//! Template-vector scoring and detection metrics.
//!
//! After training, the projection head is dropped. The template is the mean
//! of the unit-normalized encoder outputs of all normal training clips, kept
//! un-normalized. A clip's score is the dot product of the template with its
//! own normalized encoding; higher means more normal, and `sim < γ` flags an
//! anomaly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClipSample, Label};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{check_dims, dot, l2_normalize, norm};
use crate::loss::normal_probability;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateVector {
    pub values: Vec<f64>,
    pub count: usize,
}

impl TemplateVector {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Mean of the normalized encoder outputs of `normal_clips`.
pub fn build_template<'a, I>(params: &EncoderParams, normal_clips: I) -> Result<TemplateVector>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = vec![0.0; params.dims().embed];
    let mut count = 0usize;
    for x in normal_clips {
        let h = l2_normalize(&params.embed(x)?)?;
        for (s, v) in sum.iter_mut().zip(h.as_slice()) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "template needs at least one normal clip".into(),
        ));
    }
    let n = count as f64;
    Ok(TemplateVector {
        values: sum.into_iter().map(|s| s / n).collect(),
        count,
    })
}

/// `sim = v_nᵀ f(x)/‖f(x)‖`.
pub fn score_clip(params: &EncoderParams, template: &TemplateVector, x: &[f64]) -> Result<f64> {
    check_dims("template", params.dims().embed, template.values.len())?;
    let h = l2_normalize(&params.embed(x)?)?;
    Ok(dot(&template.values, h.as_slice()))
}

/// Anomalous iff `sim < gamma`; a score equal to the threshold is normal.
pub fn classify(sim: f64, gamma: f64) -> Label {
    if sim < gamma {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

/// How a trained model turns a clip into a normality score.
#[derive(Debug, Clone)]
pub enum Scorer {
    /// Cosine similarity against a template vector.
    Template {
        params: EncoderParams,
        template: TemplateVector,
    },
    /// Normal-class probability from a logit head (cross-entropy baselines).
    Logit { params: EncoderParams },
}

impl Scorer {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self {
            Scorer::Template { params, template } => score_clip(params, template, x),
            Scorer::Logit { params } => {
                let head = params.logit_head.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("model has no logit head".into())
                })?;
                Ok(normal_probability(head.logit(&params.embed(x)?)?))
            }
        }
    }
}

fn require_both(normal: &[f64], anomaly: &[f64]) -> Result<()> {
    if normal.is_empty() || anomaly.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metric needs both classes (got {} normal, {} anomalous scores)",
            normal.len(),
            anomaly.len()
        )));
    }
    if normal.iter().chain(anomaly).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Scores tagged `true` for normal, sorted ascending by score.
fn pooled(normal: &[f64], anomaly: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, true))
        .chain(anomaly.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

/// Rank-based (Mann–Whitney) AUC with normal as the positive class. Tied
/// normal/anomaly pairs count one half.
pub fn auc(normal: &[f64], anomaly: &[f64]) -> Result<f64> {
    require_both(normal, anomaly)?;
    let all = pooled(normal, anomaly);
    // Sum of midranks of the normal scores, accumulated in half-units so the
    // sum stays an exact integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let normals_in_group = all[i..=j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid * normals_in_group;
        i = j + 1;
    }
    let (n_pos, n_neg) = (normal.len() as u128, anomaly.len() as u128);
    // U = R - n(n+1)/2, kept doubled.
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// ROC points `(false-positive rate, true-positive rate)` from the strictest
/// threshold to the loosest, treating normal as positive. Tied scores move
/// both rates in one step.
pub fn roc_curve(normal: &[f64], anomaly: &[f64]) -> Result<Vec<(f64, f64)>> {
    require_both(normal, anomaly)?;
    let mut all = pooled(normal, anomaly);
    all.reverse();
    let (np, nn) = (normal.len() as f64, anomaly.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub gamma: f64,
    pub accuracy: f64,
}

/// Accuracy at every candidate threshold: ±∞ plus the midpoints between
/// adjacent distinct scores, ascending.
pub fn threshold_sweep(normal: &[f64], anomaly: &[f64]) -> Result<Vec<ThresholdPoint>> {
    require_both(normal, anomaly)?;
    let all = pooled(normal, anomaly);
    let total = all.len() as f64;
    // γ = -∞: everything normal.
    let mut correct = normal.len();
    let mut out = vec![ThresholdPoint {
        gamma: f64::NEG_INFINITY,
        accuracy: correct as f64 / total,
    }];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        // Raising γ past s flips every clip scored s to anomalous.
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let gamma = if i < all.len() {
            s + (all[i].0 - s) / 2.0
        } else {
            f64::INFINITY
        };
        out.push(ThresholdPoint {
            gamma,
            accuracy: correct as f64 / total,
        });
    }
    Ok(out)
}

/// Threshold with the highest clip-level accuracy; ties go to the larger γ.
pub fn best_threshold(normal: &[f64], anomaly: &[f64]) -> Result<ThresholdPoint> {
    let sweep = threshold_sweep(normal, anomaly)?;
    Ok(sweep
        .into_iter()
        .reduce(|best, p| if p.accuracy >= best.accuracy { p } else { best })
        .expect("sweep is never empty"))
}

/// Fraction of anomaly scores below `gamma`, or `None` for an empty set.
pub fn specificity(anomaly: &[f64], gamma: f64) -> Option<f64> {
    (!anomaly.is_empty())
        .then(|| anomaly.iter().filter(|&&s| s < gamma).count() as f64 / anomaly.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecificitySplit {
    pub closed: Option<f64>,
    pub open: Option<f64>,
    /// Weighted by clip counts.
    pub average: f64,
}

pub fn specificity_split(closed: &[f64], open: &[f64], gamma: f64) -> Result<SpecificitySplit> {
    if closed.is_empty() && open.is_empty() {
        return Err(Error::InvalidArgument(
            "specificity needs at least one anomaly score".into(),
        ));
    }
    let flagged = closed.iter().chain(open).filter(|&&s| s < gamma).count();
    Ok(SpecificitySplit {
        closed: specificity(closed, gamma),
        open: specificity(open, gamma),
        average: flagged as f64 / (closed.len() + open.len()) as f64,
    })
}

/// One scored test clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub subject_id: String,
    pub view: String,
    pub modality: String,
    pub label: Label,
    pub anomaly_class: Option<String>,
    pub seen_in_training: bool,
    pub frame_start: u64,
    pub sim: f64,
}

impl ClipScore {
    pub fn from_clip(clip: &ClipSample, sim: f64) -> Self {
        ClipScore {
            clip_id: clip.clip_id.clone(),
            subject_id: clip.subject_id.clone(),
            view: clip.view.to_string(),
            modality: clip.modality.to_string(),
            label: clip.label,
            anomaly_class: clip.anomaly_class.clone(),
            seen_in_training: clip.seen_in_training,
            frame_start: clip.frame_span.0,
            sim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub auc: f64,
    pub best_threshold: f64,
    pub best_accuracy: f64,
    /// Threshold the specificities were computed at.
    pub gamma: f64,
    pub accuracy_at_gamma: f64,
    pub closed_set_specificity: Option<f64>,
    pub open_set_specificity: Option<f64>,
    pub average_specificity: f64,
    pub normal_count: usize,
    pub closed_set_count: usize,
    pub open_set_count: usize,
    pub scores: Vec<ClipScore>,
}

impl EvalReport {
    /// Computes every metric from scored clips. Specificities use `gamma`
    /// when given, else the best-accuracy threshold.
    pub fn from_scores(name: impl Into<String>, scores: Vec<ClipScore>, gamma: Option<f64>) -> Result<Self> {
        let mut normal = Vec::new();
        let mut closed = Vec::new();
        let mut open = Vec::new();
        for s in &scores {
            match (s.label, s.seen_in_training) {
                (Label::Normal, _) => normal.push(s.sim),
                (Label::Anomalous, true) => closed.push(s.sim),
                (Label::Anomalous, false) => open.push(s.sim),
            }
        }
        let anomaly: Vec<f64> = closed.iter().chain(&open).copied().collect();
        let auc = auc(&normal, &anomaly)?;
        let best = best_threshold(&normal, &anomaly)?;
        let gamma = gamma.unwrap_or(best.gamma);
        let spec = specificity_split(&closed, &open, gamma)?;
        let correct = normal.iter().filter(|&&s| s >= gamma).count()
            + anomaly.iter().filter(|&&s| s < gamma).count();
        Ok(EvalReport {
            name: name.into(),
            auc,
            best_threshold: best.gamma,
            best_accuracy: best.accuracy,
            gamma,
            accuracy_at_gamma: correct as f64 / scores.len() as f64,
            closed_set_specificity: spec.closed,
            open_set_specificity: spec.open,
            average_specificity: spec.average,
            normal_count: normal.len(),
            closed_set_count: closed.len(),
            open_set_count: open.len(),
            scores,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores every clip with `scorer`.
pub fn score_clips(scorer: &Scorer, clips: &[ClipSample]) -> Result<Vec<ClipScore>> {
    clips
        .iter()
        .map(|c| scorer.score(&c.features).map(|s| ClipScore::from_clip(c, s)))
        .collect()
}

/// CSV with one row per [`ClipScore`] field, header included.
pub fn scores_to_csv(scores: &[ClipScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ClipScore>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        let row: ClipScore = r?;
        if !row.sim.is_finite() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("clip {}: non-finite score", row.clip_id),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DenseLayer, EncoderDims};
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn identity_params(n: usize) -> EncoderParams {
        EncoderParams::from_parts(
            vec![DenseLayer {
                weight: Matrix::identity(n),
                bias: vec![0.0; n],
            }],
            Matrix::identity(n),
            Matrix::identity(n),
            None,
        )
        .unwrap()
    }

    #[test]
    fn template_examples() {
        let p = identity_params(2);
        let same = [[0.0, 3.0], [0.0, 5.0]];
        let t = build_template(&p, same.iter().map(|x| &x[..])).unwrap();
        assert_eq!(t.values, vec![0.0, 1.0]);
        assert_eq!(t.count, 2);

        let ortho = [[2.0, 0.0], [0.0, 7.0]];
        let t = build_template(&p, ortho.iter().map(|x| &x[..])).unwrap();
        assert!((t.norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        let one = [[3.0, 4.0]];
        let t = build_template(&p, one.iter().map(|x| &x[..])).unwrap();
        assert!((t.values[0] - 0.6).abs() < 1e-15 && (t.values[1] - 0.8).abs() < 1e-15);

        assert!(build_template(&p, std::iter::empty()).is_err());
        let zero = [[0.0, 0.0]];
        assert!(matches!(
            build_template(&p, zero.iter().map(|x| &x[..])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn score_examples() {
        let p = identity_params(2);
        let unit = TemplateVector { values: vec![1.0, 0.0], count: 1 };
        assert!((score_clip(&p, &unit, &[5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score_clip(&p, &unit, &[0.0, 2.0]).unwrap(), 0.0);
        let half = TemplateVector { values: vec![0.5, 0.5], count: 2 };
        assert!((score_clip(&p, &half, &[3.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(score_clip(&p, &half, &[0.0, 0.0]).is_err());
        let wrong = TemplateVector { values: vec![1.0], count: 1 };
        assert!(score_clip(&p, &wrong, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify(0.95, 0.81), Label::Normal);
        assert_eq!(classify(0.5, 0.81), Label::Anomalous);
        assert_eq!(classify(0.81, 0.81), Label::Normal);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.9], &[0.1, 0.1, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 3], &[0.4; 5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8], &[0.85, 0.1]).unwrap(), 0.75);
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc(&[0.1], &[]).is_err());
        assert!(auc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn best_threshold_examples() {
        let b = best_threshold(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
        assert_eq!(b.accuracy, 1.0);
        assert!(b.gamma > 0.2 && b.gamma <= 0.8);

        let b = best_threshold(&[0.9, 0.8], &[0.85, 0.1]).unwrap();
        assert_eq!(b.accuracy, 0.75);
        // 0.45 and 0.875 both reach 3/4; ties go to the larger threshold.
        assert!((b.gamma - 0.875).abs() < 1e-15, "{b:?}");

        let b = best_threshold(&[1.0], &[0.0]).unwrap();
        assert_eq!(b.accuracy, 1.0);
        assert_eq!(b.gamma, 0.5);
    }

    #[test]
    fn specificity_examples() {
        let s = specificity_split(&[0.1, 0.2], &[0.3], 0.81).unwrap();
        assert_eq!((s.closed, s.open, s.average), (Some(1.0), Some(1.0), 1.0));

        let s = specificity_split(&[0.5, 0.9], &[0.7], 0.81).unwrap();
        assert_eq!(s.closed, Some(0.5));
        assert_eq!(s.open, Some(1.0));
        assert!((s.average - 2.0 / 3.0).abs() < 1e-15);

        let s = specificity_split(&[0.5], &[], f64::NEG_INFINITY).unwrap();
        assert_eq!((s.closed, s.open, s.average), (Some(0.0), None, 0.0));
        assert!(specificity_split(&[], &[], 0.5).is_err());
    }

    #[test]
    fn report_counts_and_json() {
        let mk = |id: &str, label, seen, sim| ClipScore {
            clip_id: id.into(),
            subject_id: "s".into(),
            view: "top".into(),
            modality: "depth".into(),
            label,
            anomaly_class: (label == Label::Anomalous).then(|| "c".to_string()),
            seen_in_training: seen,
            frame_start: 0,
            sim,
        };
        let scores = vec![
            mk("a", Label::Normal, true, 0.95),
            mk("b", Label::Normal, true, 0.9),
            mk("c", Label::Anomalous, true, 0.5),
            mk("d", Label::Anomalous, true, 0.9),
            mk("e", Label::Anomalous, false, 0.7),
        ];
        let r = EvalReport::from_scores("top:depth", scores, Some(0.81)).unwrap();
        assert_eq!((r.normal_count, r.closed_set_count, r.open_set_count), (2, 2, 1));
        assert_eq!(r.closed_set_specificity, Some(0.5));
        assert_eq!(r.open_set_specificity, Some(1.0));
        assert!((r.accuracy_at_gamma - 0.8).abs() < 1e-15);
        let json = r.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);

        let csv = scores_to_csv(&r.scores).unwrap();
        assert!(csv.starts_with(
            "clip_id,subject_id,view,modality,label,anomaly_class,seen_in_training,frame_start,sim\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, &csv).unwrap();
        assert_eq!(read_scores_csv(&path).unwrap(), r.scores);
    }

    #[test]
    fn logit_scorer_needs_head() {
        let p = EncoderParams::init(EncoderDims::new(3, vec![], 4).with_head(4, 2), 0).unwrap();
        assert!(Scorer::Logit { params: p.clone() }.score(&[1.0, 0.0, 0.0]).is_err());
        let s = Scorer::Logit { params: p.with_logit_head(0) }.score(&[1.0, 0.0, 0.0]).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so ties occur often.
        proptest::collection::vec((0u32..40).prop_map(|v| v as f64 / 40.0), 1..max)
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(n in scores(40), a in scores(40)) {
            let base = auc(&n, &a).unwrap();
            let f = |v: &f64| (3.0 * v).exp() - 7.0;
            let tn: Vec<f64> = n.iter().map(f).collect();
            let ta: Vec<f64> = a.iter().map(f).collect();
            prop_assert_eq!(base, auc(&tn, &ta).unwrap());
        }

        #[test]
        fn auc_complement(n in proptest::collection::vec(0.0f64..1.0, 1..30),
                          a in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            // Continuous draws: ties have probability ~0.
            let s = auc(&n, &a).unwrap() + auc(&a, &n).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn best_accuracy_beats_class_prior(n in scores(30), a in scores(30)) {
            let b = best_threshold(&n, &a).unwrap();
            let total = (n.len() + a.len()) as f64;
            let prior = n.len().max(a.len()) as f64 / total;
            prop_assert!(b.accuracy >= prior - 1e-15);
        }
    }
}
