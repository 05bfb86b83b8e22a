//! Seeded synthetic open-set dataset.
//!
//! Normal clips cluster around one hidden unit direction; each anomaly class
//! clusters around its own direction placed at a configured angle from the
//! normal one. Only the first `seen_classes` classes occur in training.
//! Every recording moment is observed by each configured stream with a mix
//! of shared and stream-private noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClipSample, DatasetSplit, Label, StreamKey};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Frames per clip window.
const CLIP_FRAMES: u64 = 32;
const MAX_DIRECTION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub input_dim: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub train_normals_per_subject: usize,
    pub train_anomalies_per_subject: usize,
    pub test_normals_per_subject: usize,
    /// Clips per anomaly class (seen and unseen) for every test subject.
    pub test_anomalies_per_class: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    /// Noise scale σ_c around each cluster direction.
    pub noise: f64,
    /// Fraction of the noise variance shared by all streams of one moment.
    pub shared_noise: f64,
    /// Scale of a per-subject offset added to every clip of that subject.
    pub subject_spread: f64,
    /// Dimension of the subspace the subject offsets live in.
    pub subject_style_dims: usize,
    /// Angle range (degrees) between the normal and each anomaly direction.
    pub min_separation_deg: f64,
    pub max_separation_deg: f64,
    /// Dimension of the subspace, orthogonal to the normal direction, that
    /// all anomaly class directions deviate into; 0 leaves them unconstrained.
    pub anomaly_dims: usize,
    /// Minimum pairwise angle (degrees) between anomaly class directions.
    pub min_class_separation_deg: f64,
    pub streams: Vec<StreamKey>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            input_dim: 32,
            train_subjects: 25,
            test_subjects: 6,
            train_normals_per_subject: 8,
            train_anomalies_per_subject: 5,
            test_normals_per_subject: 30,
            test_anomalies_per_class: 2,
            seen_classes: 8,
            unseen_classes: 16,
            noise: 0.6,
            shared_noise: 0.5,
            subject_spread: 1.0,
            subject_style_dims: 8,
            min_separation_deg: 40.0,
            max_separation_deg: 70.0,
            anomaly_dims: 3,
            min_class_separation_deg: 10.0,
            streams: StreamKey::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim < 2 {
            return bad(format!("input_dim must be at least 2, got {}", self.input_dim));
        }
        if self.train_subjects == 0 || self.test_subjects == 0 {
            return bad("need at least one train and one test subject".into());
        }
        if self.train_normals_per_subject == 0 {
            return bad("train_normals_per_subject must be positive".into());
        }
        if self.seen_classes == 0 {
            return bad("need at least one seen anomaly class".into());
        }
        if self.streams.is_empty() {
            return bad("no streams requested".into());
        }
        let (lo, hi) = (self.min_separation_deg, self.max_separation_deg);
        if !(lo > 0.0 && lo <= hi && hi <= 180.0) {
            return bad(format!(
                "separation angles must satisfy 0 < min <= max <= 180, got [{lo}, {hi}]"
            ));
        }
        if !(0.0..180.0).contains(&self.min_class_separation_deg) {
            return bad(format!(
                "min_class_separation_deg must lie in [0, 180), got {}",
                self.min_class_separation_deg
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.shared_noise) {
            return bad(format!("shared_noise must lie in [0, 1], got {}", self.shared_noise));
        }
        if !(self.subject_spread >= 0.0 && self.subject_spread.is_finite()) {
            return bad(format!(
                "subject_spread must be non-negative, got {}",
                self.subject_spread
            ));
        }
        if self.subject_style_dims == 0 || self.subject_style_dims + self.anomaly_dims >= self.input_dim {
            return bad(format!(
                "subject_style_dims ({}) + anomaly_dims ({}) must be positive and below input_dim ({})",
                self.subject_style_dims, self.anomaly_dims, self.input_dim
            ));
        }
        if self.anomaly_dims == 1 {
            return bad("anomaly_dims must be 0 or at least 2".into());
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at angle `theta` from `normal`, in a random orthogonal
/// direction; drawn inside `span` (orthonormal, orthogonal to `normal`) when
/// it is non-empty.
fn direction_at_angle(rng: &mut ChaCha8Rng, normal: &[f64], span: &[Vec<f64>], theta: f64) -> Vec<f64> {
    loop {
        let perp: Vec<f64> = if span.is_empty() {
            let g = unit_gaussian(rng, normal.len());
            let along = dot(&g, normal);
            g.iter().zip(normal).map(|(gi, ni)| gi - along * ni).collect()
        } else {
            let c = unit_gaussian(rng, span.len());
            (0..normal.len())
                .map(|i| span.iter().zip(&c).map(|(b, ci)| ci * b[i]).sum())
                .collect()
        };
        let pn = norm(&perp);
        if pn < 1e-9 {
            continue;
        }
        return normal
            .iter()
            .zip(&perp)
            .map(|(ni, pi)| theta.cos() * ni + theta.sin() * pi / pn)
            .collect();
    }
}

fn class_directions(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    normal: &[f64],
    span: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let total = cfg.seen_classes + cfg.unseen_classes;
    let min_cos = cfg.min_class_separation_deg.to_radians().cos();
    let (lo, hi) = (
        cfg.min_separation_deg.to_radians(),
        cfg.max_separation_deg.to_radians(),
    );
    // One jittered angle per equal-width stratum of [lo, hi]; seen classes
    // take evenly spaced strata so they span the same range as unseen ones.
    let mut strata: Vec<f64> = (0..total)
        .map(|i| lo + (hi - lo) * (i as f64 + rng.random::<f64>()) / total as f64)
        .collect();
    let seen_strata: Vec<usize> = (0..cfg.seen_classes)
        .map(|j| (2 * j + 1) * total / (2 * cfg.seen_classes))
        .collect();
    let mut angles: Vec<f64> = seen_strata.iter().map(|&i| strata[i]).collect();
    for &i in seen_strata.iter().rev() {
        strata.remove(i);
    }
    angles.extend(strata);

    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(total);
    for (c, &theta) in angles.iter().enumerate() {
        let mut placed = false;
        for _ in 0..MAX_DIRECTION_ATTEMPTS {
            let d = direction_at_angle(rng, normal, span, theta);
            if dirs.iter().all(|o| dot(o, &d) <= min_cos) {
                dirs.push(d);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place anomaly class {c} of {total}: separation constraints \
                 are infeasible in {} dimensions",
                cfg.input_dim
            )));
        }
    }
    Ok(dirs)
}

/// Orthonormal basis of a random `k`-dimensional subspace orthogonal to
/// `normal` and to every vector in `avoid`.
fn random_basis(rng: &mut ChaCha8Rng, normal: &[f64], avoid: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut g = unit_gaussian(rng, normal.len());
        for b in std::iter::once(normal).chain(avoid.iter().chain(&basis).map(Vec::as_slice)) {
            let a = dot(&g, b);
            g.iter_mut().zip(b).for_each(|(gi, bi)| *gi -= a * bi);
        }
        let n = norm(&g);
        if n > 1e-6 {
            basis.push(g.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

enum Event {
    Normal,
    Anomaly(usize),
}

/// Generates a subject-disjoint split; unseen classes occur only in test.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.input_dim;
    let normal_dir = unit_gaussian(&mut rng, dim);
    let anomaly_span = random_basis(&mut rng, &normal_dir, &[], cfg.anomaly_dims);
    let class_dirs = class_directions(cfg, &mut rng, &normal_dir, &anomaly_span)?;
    let style = random_basis(&mut rng, &normal_dir, &anomaly_span, cfg.subject_style_dims);
    let style_gauss = Normal::new(0.0, cfg.subject_spread / (style.len() as f64).sqrt())
        .map_err(|e| Error::Config(format!("subject_spread: {e}")))?;
    let subject_offset = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut o = vec![0.0; dim];
        for b in &style {
            let c = style_gauss.sample(rng);
            o.iter_mut().zip(b).for_each(|(oi, bi)| *oi += c * bi);
        }
        o
    };
    let class_name = |c: usize| {
        if c < cfg.seen_classes {
            format!("seen_{c:02}")
        } else {
            format!("unseen_{:02}", c - cfg.seen_classes)
        }
    };
    let gauss = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
    let shared_w = cfg.shared_noise.sqrt() * cfg.noise;
    let private_w = (1.0 - cfg.shared_noise).sqrt() * cfg.noise;

    let emit = |rng: &mut ChaCha8Rng, out: &mut Vec<ClipSample>, subject: &str, events: Vec<Event>| {
        let offset = subject_offset(rng);
        for (k, ev) in events.into_iter().enumerate() {
            let (center, label, class) = match ev {
                Event::Normal => (&normal_dir, Label::Normal, None),
                Event::Anomaly(c) => (&class_dirs[c], Label::Anomalous, Some(c)),
            };
            let shared: Vec<f64> = (0..dim).map(|_| gauss.sample(rng)).collect();
            let start = k as u64 * CLIP_FRAMES;
            for stream in &cfg.streams {
                let mut x: Vec<f64> = center
                    .iter()
                    .zip(&offset)
                    .zip(&shared)
                    .map(|((c, o), s)| c + o + shared_w * s + private_w * gauss.sample(rng))
                    .collect();
                let n = norm(&x);
                if n > 1e-12 {
                    x.iter_mut().for_each(|v| *v /= n);
                }
                out.push(ClipSample {
                    clip_id: format!("{subject}-e{k:03}-{}", stream.slug()),
                    subject_id: subject.to_owned(),
                    view: stream.view,
                    modality: stream.modality,
                    label,
                    anomaly_class: class.map(class_name),
                    seen_in_training: class.is_none_or(|c| c < cfg.seen_classes),
                    features: x,
                    frame_span: (start, start + CLIP_FRAMES - 1),
                });
            }
        }
    };

    let mut train = Vec::new();
    for s in 0..cfg.train_subjects {
        let mut events: Vec<Event> = (0..cfg.train_normals_per_subject).map(|_| Event::Normal).collect();
        events.extend(
            (0..cfg.train_anomalies_per_subject)
                .map(|k| Event::Anomaly((s * cfg.train_anomalies_per_subject + k) % cfg.seen_classes)),
        );
        events.shuffle(&mut rng);
        emit(&mut rng, &mut train, &format!("train-s{s:02}"), events);
    }

    let mut test = Vec::new();
    let total_classes = cfg.seen_classes + cfg.unseen_classes;
    for s in 0..cfg.test_subjects {
        let mut events: Vec<Event> = (0..cfg.test_normals_per_subject).map(|_| Event::Normal).collect();
        for c in 0..total_classes {
            events.extend((0..cfg.test_anomalies_per_class).map(|_| Event::Anomaly(c)));
        }
        events.shuffle(&mut rng);
        emit(&mut rng, &mut test, &format!("test-s{s:02}"), events);
    }

    DatasetSplit::new(train, test)
}
