//! Supervised contrastive objective over normal positives and anomalous
//! negatives, plus the binary cross-entropy baselines.
//!
//! For normals `v_1..v_K`, anomalies `w_1..w_M` and temperature `τ`, the
//! per-pair loss is
//!
//! ```text
//! L_ij = -log( e^{v_i·v_j/τ} / ( e^{v_i·v_j/τ} + Σ_m e^{v_i·w_m/τ} ) )
//! ```
//!
//! and the batch loss averages it over all `K(K-1)` ordered pairs `i ≠ j`.
//! Other normals never appear in the denominator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, dot, Embedding};

/// Allowed deviation from unit norm for batch members.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Projected, unit-norm embeddings for one training step.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    normals: Vec<Embedding>,
    anomalies: Vec<Embedding>,
    tau: f64,
}

impl MiniBatch {
    pub fn new(normals: Vec<Embedding>, anomalies: Vec<Embedding>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let dim = normals
            .first()
            .or(anomalies.first())
            .map_or(0, Embedding::dim);
        for e in normals.iter().chain(&anomalies) {
            check_dims("mini-batch embedding", dim, e.dim())?;
            let n = e.norm();
            if !n.is_finite() {
                return Err(Error::NonFinite("mini-batch embedding".into()));
            }
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "mini-batch embeddings must be unit norm, found norm {n}"
                )));
            }
        }
        Ok(MiniBatch {
            normals,
            anomalies,
            tau,
        })
    }

    pub fn normals(&self) -> &[Embedding] {
        &self.normals
    }

    pub fn anomalies(&self) -> &[Embedding] {
        &self.anomalies
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Logits `v_i·w_m / τ` for normal `i` against every anomaly.
    fn negative_logits(&self, i: usize) -> Vec<f64> {
        let vi = self.normals[i].as_slice();
        self.anomalies
            .iter()
            .map(|w| dot(vi, w.as_slice()) / self.tau)
            .collect()
    }

    fn require_pairs(&self) -> Result<()> {
        if self.normals.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive loss needs at least 2 normals, got {}",
                self.normals.len()
            )));
        }
        Ok(())
    }

    /// Loss of one ordered positive pair `(i, j)`.
    pub fn pair_loss(&self, i: usize, j: usize) -> Result<f64> {
        let k = self.normals.len();
        if i >= k || j >= k {
            return Err(Error::InvalidArgument(format!(
                "pair ({i}, {j}) out of range for {k} normals"
            )));
        }
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "positive pair needs distinct indices, got ({i}, {i})"
            )));
        }
        let pos = dot(self.normals[i].as_slice(), self.normals[j].as_slice()) / self.tau;
        Ok(PairSoftmax::new(pos, &self.negative_logits(i)).loss)
    }

    /// Mean of [`pair_loss`](Self::pair_loss) over all ordered pairs.
    pub fn batch_loss(&self) -> Result<f64> {
        self.require_pairs()?;
        let k = self.normals.len();
        let mut total = 0.0;
        for i in 0..k {
            let neg = self.negative_logits(i);
            for j in (0..k).filter(|&j| j != i) {
                let pos = dot(self.normals[i].as_slice(), self.normals[j].as_slice()) / self.tau;
                total += PairSoftmax::new(pos, &neg).loss;
            }
        }
        Ok(total / (k * (k - 1)) as f64)
    }

    /// Batch loss together with `∂L/∂v` for every normal and anomaly,
    /// treating the embeddings as free vectors.
    pub fn batch_loss_grad(&self) -> Result<BatchGrad> {
        self.require_pairs()?;
        let k = self.normals.len();
        let m = self.anomalies.len();
        let dim = self.normals[0].dim();
        let scale = 1.0 / (k * (k - 1)) as f64;
        let inv_tau = 1.0 / self.tau;

        let mut grad_normals = vec![vec![0.0; dim]; k];
        let mut grad_anomalies = vec![vec![0.0; dim]; m];
        // coef[i][m]: accumulated ∂L/∂(v_i·w_m).
        let mut coef = vec![vec![0.0; m]; k];
        let mut total = 0.0;

        for i in 0..k {
            let neg = self.negative_logits(i);
            for j in (0..k).filter(|&j| j != i) {
                let vi = self.normals[i].as_slice();
                let vj = self.normals[j].as_slice();
                let pos = dot(vi, vj) * inv_tau;
                let sm = PairSoftmax::new(pos, &neg);
                total += sm.loss;

                let d_pos = scale * (sm.p_pos - 1.0) * inv_tau;
                axpy(&mut grad_normals[i], d_pos, vj);
                axpy(&mut grad_normals[j], d_pos, vi);
                for (c, q) in coef[i].iter_mut().zip(sm.neg_probs(&neg)) {
                    *c += scale * q * inv_tau;
                }
            }
        }
        for i in 0..k {
            let vi = self.normals[i].as_slice();
            for (mi, &c) in coef[i].iter().enumerate() {
                axpy(&mut grad_normals[i], c, self.anomalies[mi].as_slice());
                axpy(&mut grad_anomalies[mi], c, vi);
            }
        }

        Ok(BatchGrad {
            loss: total * scale,
            normals: grad_normals.into_iter().map(Embedding::new).collect(),
            anomalies: grad_anomalies.into_iter().map(Embedding::new).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub normals: Vec<Embedding>,
    pub anomalies: Vec<Embedding>,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// (M+1)-way softmax with the positive in slot 0, shifted by the max logit.
struct PairSoftmax {
    max: f64,
    denom: f64,
    p_pos: f64,
    loss: f64,
}

impl PairSoftmax {
    fn new(pos: f64, neg: &[f64]) -> Self {
        let max = neg.iter().copied().fold(pos, f64::max);
        let e_pos = (pos - max).exp();
        let denom = e_pos + neg.iter().map(|a| (a - max).exp()).sum::<f64>();
        PairSoftmax {
            max,
            denom,
            p_pos: e_pos / denom,
            loss: denom.ln() - (pos - max),
        }
    }

    fn neg_probs<'a>(&'a self, neg: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        neg.iter().map(move |a| (a - self.max).exp() / self.denom)
    }
}

/// Which objective a model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Contrastive,
    CrossEntropy,
    WeightedCrossEntropy,
}

impl Objective {
    pub(crate) fn code(self) -> u8 {
        match self {
            Objective::Contrastive => 0,
            Objective::CrossEntropy => 1,
            Objective::WeightedCrossEntropy => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Objective::Contrastive),
            1 => Some(Objective::CrossEntropy),
            2 => Some(Objective::WeightedCrossEntropy),
            _ => None,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Contrastive => "contrastive",
            Objective::CrossEntropy => "ce",
            Objective::WeightedCrossEntropy => "weighted_ce",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Objective::Contrastive),
            "ce" => Ok(Objective::CrossEntropy),
            "weighted_ce" => Ok(Objective::WeightedCrossEntropy),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected contrastive, ce or weighted_ce)"
            ))),
        }
    }
}

/// Per-class weights for the binary cross-entropy baselines. The positive
/// class is "normal".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub normal: f64,
    pub anomalous: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        normal: 1.0,
        anomalous: 1.0,
    };

    /// Inverse class frequency, normalized to sum to one.
    pub fn inverse_frequency(normal_count: usize, anomalous_count: usize) -> Result<Self> {
        if normal_count == 0 || anomalous_count == 0 {
            return Err(Error::InvalidArgument(
                "inverse-frequency weights need both classes present".into(),
            ));
        }
        let (wn, wa) = (1.0 / normal_count as f64, 1.0 / anomalous_count as f64);
        let s = wn + wa;
        Ok(ClassWeights {
            normal: wn / s,
            anomalous: wa / s,
        })
    }

    fn for_label(&self, is_normal: bool) -> f64 {
        if is_normal {
            self.normal
        } else {
            self.anomalous
        }
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted mean binary cross-entropy over logits (`Σ wᵢℓᵢ / Σ wᵢ`) and its
/// gradient with respect to each logit.
pub fn binary_ce_loss_grad(
    logits: &[f64],
    is_normal: &[bool],
    weights: ClassWeights,
) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty cross-entropy batch".into()));
    }
    check_dims("cross-entropy labels", logits.len(), is_normal.len())?;
    if !(weights.normal > 0.0 && weights.anomalous > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "class weights must be positive: {weights:?}"
        )));
    }
    let total_w: f64 = is_normal.iter().map(|&y| weights.for_label(y)).sum();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(is_normal) {
        let w = weights.for_label(y) / total_w;
        let (l, target) = if y { (softplus(-z), 1.0) } else { (softplus(z), 0.0) };
        loss += w * l;
        grad.push(w * (sigmoid(z) - target));
    }
    Ok((loss, grad))
}

pub fn binary_ce_loss(logits: &[f64], is_normal: &[bool], weights: ClassWeights) -> Result<f64> {
    binary_ce_loss_grad(logits, is_normal, weights).map(|(l, _)| l)
}

/// Probability of the normal class for a logit.
pub fn normal_probability(logit: f64) -> f64 {
    sigmoid(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn no_anomalies_means_zero_loss() {
        let b = MiniBatch::new(vec![e(&[1.0, 0.0]), e(&[0.6, 0.8]), e(&[0.0, 1.0])], vec![], 0.1)
            .unwrap();
        assert_eq!(b.pair_loss(0, 1).unwrap(), 0.0);
        assert_eq!(b.batch_loss().unwrap(), 0.0);
        let g = b.batch_loss_grad().unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.normals.iter().all(|v| v.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn pair_loss_hand_values() {
        // -ln(e/(e+1)) = ln(1 + e^-1)
        let b = MiniBatch::new(vec![e(&[1.0, 0.0]), e(&[1.0, 0.0])], vec![e(&[0.0, 1.0])], 1.0)
            .unwrap();
        let l = b.pair_loss(0, 1).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-15, "{l}");
        assert!((b.batch_loss().unwrap() - l).abs() < 1e-15);

        let sharp =
            MiniBatch::new(vec![e(&[1.0, 0.0]), e(&[1.0, 0.0])], vec![e(&[0.0, 1.0])], 0.1)
                .unwrap();
        let ls = sharp.pair_loss(0, 1).unwrap();
        // ln(1 + e^-10)
        assert!((ls - 4.539_889_921_686_465e-5).abs() < 1e-17, "{ls}");
    }

    #[test]
    fn three_identical_normals() {
        let n = e(&[1.0, 0.0]);
        let b = MiniBatch::new(vec![n.clone(), n.clone(), n], vec![e(&[0.0, 1.0])], 1.0).unwrap();
        assert!((b.batch_loss().unwrap() - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn index_errors() {
        let b = MiniBatch::new(vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])], vec![], 1.0).unwrap();
        assert!(b.pair_loss(0, 0).is_err());
        assert!(b.pair_loss(0, 2).is_err());
        let single = MiniBatch::new(vec![e(&[1.0, 0.0])], vec![e(&[0.0, 1.0])], 1.0).unwrap();
        assert!(single.batch_loss().is_err());
        assert!(single.batch_loss_grad().is_err());
    }

    #[test]
    fn batch_validation() {
        assert!(MiniBatch::new(vec![e(&[2.0, 0.0])], vec![], 1.0).is_err());
        assert!(MiniBatch::new(vec![e(&[1.0, 0.0])], vec![], 0.0).is_err());
        assert!(MiniBatch::new(vec![e(&[1.0, 0.0])], vec![e(&[1.0, 0.0, 0.0])], 1.0).is_err());
    }

    /// K=2, M=1, dim 2: with s = v1·v2/τ, a_i = v_i·w/τ and
    /// p_i = e^s/(e^s + e^{a_i}), the loss is ½(L_12 + L_21) and
    /// ∂L/∂v1 = ½[(p1-1)/τ v2 + (1-p1)/τ w + (p2-1)/τ v2],
    /// ∂L/∂w  = ½[(1-p1)/τ v1 + (1-p2)/τ v2].
    #[test]
    fn two_by_one_gradient_by_hand() {
        let tau = 0.5;
        let v1 = [0.6, 0.8];
        let v2 = [1.0, 0.0];
        let w = [0.0, -1.0];
        let b = MiniBatch::new(vec![e(&v1), e(&v2)], vec![e(&w)], tau).unwrap();
        let s = (0.6 * 1.0 + 0.8 * 0.0) / tau;
        let a1 = (0.6 * 0.0 - 0.8) / tau;
        let a2 = 0.0 / tau;
        let p1 = s.exp() / (s.exp() + a1.exp());
        let p2 = s.exp() / (s.exp() + a2.exp());
        let g = b.batch_loss_grad().unwrap();
        let expect_v1: Vec<f64> = (0..2)
            .map(|d| 0.5 * ((p1 - 1.0) / tau * v2[d] + (1.0 - p1) / tau * w[d] + (p2 - 1.0) / tau * v2[d]))
            .collect();
        let expect_v2: Vec<f64> = (0..2)
            .map(|d| 0.5 * ((p1 - 1.0) / tau * v1[d] + (p2 - 1.0) / tau * v1[d] + (1.0 - p2) / tau * w[d]))
            .collect();
        let expect_w: Vec<f64> = (0..2)
            .map(|d| 0.5 * ((1.0 - p1) / tau * v1[d] + (1.0 - p2) / tau * v2[d]))
            .collect();
        for d in 0..2 {
            assert!((g.normals[0][d] - expect_v1[d]).abs() < 1e-14);
            assert!((g.normals[1][d] - expect_v2[d]).abs() < 1e-14);
            assert!((g.anomalies[0][d] - expect_w[d]).abs() < 1e-14);
        }
        let expect_loss = 0.5 * (-p1.ln() - p2.ln());
        assert!((g.loss - expect_loss).abs() < 1e-14);
    }

    #[test]
    fn ce_examples() {
        for y in [true, false] {
            let l = binary_ce_loss(&[0.0], &[y], ClassWeights::UNIT).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(binary_ce_loss(&[100.0], &[true], ClassWeights::UNIT).unwrap() < 1e-40);
        assert!(binary_ce_loss(&[-100.0], &[false], ClassWeights::UNIT).unwrap() < 1e-40);
        assert!(binary_ce_loss(&[], &[], ClassWeights::UNIT).is_err());
    }

    #[test]
    fn weighted_ce_matches_direct_formula() {
        let w = ClassWeights::inverse_frequency(10, 150).unwrap();
        assert!((w.normal - (1.0 / 10.0) / (1.0 / 10.0 + 1.0 / 150.0)).abs() < 1e-15);
        assert!((w.normal + w.anomalous - 1.0).abs() < 1e-15);

        let logits = [1.2, -0.3, 0.7, -2.0];
        let labels = [true, true, false, false];
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let terms: Vec<(f64, f64)> = logits
            .iter()
            .zip(labels)
            .map(|(&z, y)| {
                if y {
                    (w.normal, -sig(z).ln())
                } else {
                    (w.anomalous, -(1.0 - sig(z)).ln())
                }
            })
            .collect();
        let expect = terms.iter().map(|(wi, l)| wi * l).sum::<f64>()
            / terms.iter().map(|(wi, _)| wi).sum::<f64>();
        let got = binary_ce_loss(&logits, &labels, w).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let logits = [0.4, -1.1, 2.5];
        let labels = [true, false, false];
        let w = ClassWeights::inverse_frequency(1, 2).unwrap();
        let (_, g) = binary_ce_loss_grad(&logits, &labels, w).unwrap();
        for i in 0..3 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (binary_ce_loss(&up, &labels, w).unwrap()
                - binary_ce_loss(&dn, &labels, w).unwrap())
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Embedding> {
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |v| dot(v, v) > 1e-2)
            .prop_map(|v| {
                let n = dot(&v, &v).sqrt();
                Embedding::new(v.into_iter().map(|x| x / n).collect())
            })
    }

    proptest! {
        #[test]
        fn loss_nonneg_and_permutation_invariant(
            normals in proptest::collection::vec(unit_vec(4), 2..6),
            anomalies in proptest::collection::vec(unit_vec(4), 1..6),
            tau in 0.05f64..2.0,
            rot in 0usize..6,
        ) {
            let b = MiniBatch::new(normals.clone(), anomalies.clone(), tau).unwrap();
            let l = b.batch_loss().unwrap();
            prop_assert!(l > 0.0);

            let mut pn = normals.clone();
            pn.rotate_left(rot % normals.len());
            pn.reverse();
            let mut pa = anomalies.clone();
            pa.rotate_right(rot % anomalies.len());
            let lp = MiniBatch::new(pn, pa, tau).unwrap().batch_loss().unwrap();
            prop_assert!((l - lp).abs() <= 1e-12 * l.max(1.0));
        }

        #[test]
        fn pair_loss_monotone_in_similarities(
            normals in proptest::collection::vec(unit_vec(3), 2..4),
            anomalies in proptest::collection::vec(unit_vec(3), 1..4),
            tau in 0.1f64..1.0,
        ) {
            let b = MiniBatch::new(normals, anomalies, tau).unwrap();
            let base_pos = dot(b.normals[0].as_slice(), b.normals[1].as_slice()) / tau;
            let neg = b.negative_logits(0);
            let l0 = PairSoftmax::new(base_pos, &neg).loss;
            // Raising the positive similarity lowers the loss.
            prop_assert!(PairSoftmax::new(base_pos + 0.1, &neg).loss < l0);
            // Raising any negative similarity raises it.
            for m in 0..neg.len() {
                let mut bumped = neg.clone();
                bumped[m] += 0.1;
                prop_assert!(PairSoftmax::new(base_pos, &bumped).loss > l0);
            }
        }
    }
}
