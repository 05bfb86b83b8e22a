//! Mini-batch SGD with momentum and the training loop.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{subset, ClipSample, DatasetSplit};
use crate::encoder::{EncoderParams, ForwardTrace};
use crate::error::{Error, ErrorKind, Result};
use crate::linalg::Embedding;
use crate::loss::{binary_ce_loss_grad, ClassWeights, MiniBatch, Objective};

/// Clips per gradient-accumulation chunk. Chunks are reduced in index
/// order, so results do not depend on the thread count.
const CHUNK: usize = 32;

/// Learning rate for a zero-based epoch under step decay.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Momentum buffer, same shape as the parameters.
#[derive(Debug, Clone)]
pub struct MomentumState {
    velocity: EncoderParams,
}

impl MomentumState {
    pub fn new(params: &EncoderParams) -> Self {
        MomentumState {
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &EncoderParams {
        &self.velocity
    }
}

/// `v ← μv + g; w ← w − lr·v`. Rejects non-finite gradients before touching
/// any state.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !params.congruent(grads) || !params.congruent(&state.velocity) {
        return Err(Error::InvalidArgument(
            "gradient or momentum buffer does not match parameter shapes".into(),
        ));
    }
    for (t, g) in grads.tensors().iter().enumerate() {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient tensor {t} entry {i} is {}",
                g[i]
            )));
        }
    }
    let gs = grads.tensors();
    for ((w, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(gs)
    {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Indices of one mini-batch drawn from pools of the given sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub normals: Vec<usize>,
    pub anomalies: Vec<usize>,
}

fn draw<R: Rng>(rng: &mut R, pool: usize, amount: usize) -> Vec<usize> {
    if amount <= pool {
        index::sample(rng, pool, amount).into_vec()
    } else {
        (0..amount).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Uniform draw of `k` normal and `m` anomalous indices, without replacement
/// when the pool is large enough and with replacement otherwise.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    normal_pool: usize,
    anomaly_pool: usize,
    k: usize,
    m: usize,
) -> Result<BatchIndices> {
    if normal_pool == 0 || k == 0 {
        return Err(Error::Dataset("no normal clips to sample".into()));
    }
    if anomaly_pool == 0 && m > 0 {
        return Err(Error::Dataset("no anomalous clips to sample".into()));
    }
    Ok(BatchIndices {
        normals: draw(rng, normal_pool, k),
        anomalies: if m == 0 {
            Vec::new()
        } else {
            draw(rng, anomaly_pool, m)
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn history_to_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.step, r.epoch, r.lr, r.loss).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    pub normal_count: usize,
    pub anomaly_count: usize,
}

/// Trains an encoder on the training split of `dataset` (all clips, so pass
/// a single-stream view) after λ subsetting.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    dataset: &DatasetSplit,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = dataset
        .feature_dim()
        .ok_or_else(|| Error::Dataset("dataset has no clips".into()))?;
    let data = subset(dataset, cfg.lambda_n, cfg.lambda_a, cfg.folds, cfg.seed)?;
    let normals: Vec<&ClipSample> = data.train.iter().filter(|c| c.is_normal()).collect();
    let anomalies: Vec<&ClipSample> = data.train.iter().filter(|c| !c.is_normal()).collect();
    let k = cfg.batch_normals;
    if normals.len() < k {
        return Err(Error::Dataset(format!(
            "{} normal training clips, need at least batch_normals = {k}",
            normals.len()
        )));
    }
    if anomalies.is_empty() {
        return Err(Error::Dataset("no anomalous training clips".into()));
    }

    let mut params = EncoderParams::init(model.dims(dim), cfg.seed)?;
    let weights = match cfg.objective {
        Objective::Contrastive => None,
        Objective::CrossEntropy => Some(ClassWeights::UNIT),
        Objective::WeightedCrossEntropy => {
            Some(ClassWeights::inverse_frequency(normals.len(), anomalies.len())?)
        }
    };
    if weights.is_some() {
        params = params.with_logit_head(cfg.seed);
    }
    let mut state = MomentumState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let noise = (cfg.feature_noise > 0.0)
        .then(|| Normal::new(0.0, cfg.feature_noise))
        .transpose()
        .map_err(|e| Error::Config(format!("feature_noise: {e}")))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let batches_per_epoch = normals.len().div_ceil(k);
    let mut history = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        for _ in 0..batches_per_epoch {
            let idx = sample_batch(&mut rng, normals.len(), anomalies.len(), k, cfg.batch_anomalies)?;
            let mut inputs: Vec<Vec<f64>> = idx
                .normals
                .iter()
                .map(|&i| normals[i].features.clone())
                .chain(idx.anomalies.iter().map(|&i| anomalies[i].features.clone()))
                .collect();
            if let Some(dist) = &noise {
                for x in &mut inputs {
                    for v in x {
                        *v += dist.sample(&mut rng);
                    }
                }
            }
            let (loss, grads) = pool.install(|| match weights {
                None => contrastive_grads(&params, &inputs, k, cfg.tau),
                Some(w) => ce_grads(&params, &inputs, k, w),
            })?;
            let diverged = |message: String, params: EncoderParams| Error::Diverged {
                step,
                epoch,
                message,
                last_good: Box::new(Checkpoint {
                    seed: cfg.seed,
                    objective: cfg.objective,
                    params,
                }),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), params));
            }
            let before = params.clone();
            if let Err(e) = sgd_step(&mut params, &grads, &mut state, lr, cfg.momentum) {
                return Err(diverged(e.to_string(), before));
            }
            if !params.is_finite() {
                return Err(diverged("parameters became non-finite".into(), before));
            }
            history.push(LossRecord { step, epoch, lr, loss });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            seed: cfg.seed,
            objective: cfg.objective,
            params,
        },
        history,
        normal_count: normals.len(),
        anomaly_count: anomalies.len(),
    })
}

/// Chunked forward pass; a numerical failure yields `None` so the caller
/// reports divergence with the last good parameters.
fn forward_chunks<F>(inputs: &[Vec<f64>], f: F) -> Result<Option<Vec<(Embedding, ForwardTrace)>>>
where
    F: Fn(&[&[f64]]) -> Result<Vec<(Embedding, ForwardTrace)>> + Sync,
{
    let out: Result<Vec<Vec<_>>> = inputs
        .par_chunks(CHUNK)
        .map(|c| f(&c.iter().map(Vec::as_slice).collect::<Vec<_>>()))
        .collect();
    match out {
        Ok(parts) => Ok(Some(parts.into_iter().flatten().collect())),
        Err(e) if e.kind() == ErrorKind::Numerical => Ok(None),
        Err(e) => Err(e),
    }
}

fn reduce_chunks(params: &EncoderParams, parts: Vec<EncoderParams>) -> EncoderParams {
    let mut total = params.zeros_like();
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    total
}

fn contrastive_grads(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    k: usize,
    tau: f64,
) -> Result<(f64, EncoderParams)> {
    let Some(fwd) = forward_chunks(inputs, |xs| params.forward_batch(xs))? else {
        return Ok((f64::NAN, params.zeros_like()));
    };
    let (mut vs, traces): (Vec<Embedding>, Vec<ForwardTrace>) = fwd.into_iter().unzip();
    let anomalies = vs.split_off(k);
    let batch = MiniBatch::new(vs, anomalies, tau)?;
    let g = batch.batch_loss_grad()?;
    let grad_v: Vec<Embedding> = g.normals.into_iter().chain(g.anomalies).collect();
    let parts = traces
        .par_chunks(CHUNK)
        .zip(grad_v.par_chunks(CHUNK))
        .map(|(ts, gs)| {
            let mut acc = params.zeros_like();
            let ts: Vec<&ForwardTrace> = ts.iter().collect();
            let gs: Vec<&Embedding> = gs.iter().collect();
            params.backward_batch_into(&ts, &gs, &mut acc)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.loss, reduce_chunks(params, parts)))
}

fn ce_grads(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    k: usize,
    weights: ClassWeights,
) -> Result<(f64, EncoderParams)> {
    let head = params
        .logit_head
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("cross-entropy needs a logit head".into()))?;
    let Some(fwd) = forward_chunks(inputs, |xs| params.encode_batch(xs))? else {
        return Ok((f64::NAN, params.zeros_like()));
    };
    let logits = fwd
        .iter()
        .map(|(h, _)| head.logit(h))
        .collect::<Result<Vec<_>>>()?;
    let is_normal: Vec<bool> = (0..inputs.len()).map(|i| i < k).collect();
    let (loss, dz) = binary_ce_loss_grad(&logits, &is_normal, weights)?;
    let parts = fwd
        .par_chunks(CHUNK)
        .zip(dz.par_chunks(CHUNK))
        .map(|(fs, ds)| {
            let mut acc = params.zeros_like();
            let lh = acc.logit_head.as_mut().expect("logit head in gradient buffer");
            for ((h, _), &d) in fs.iter().zip(ds) {
                for (gw, hi) in lh.weight.iter_mut().zip(h.as_slice()) {
                    *gw += d * hi;
                }
                lh.bias += d;
            }
            let grad_h: Vec<Vec<f64>> = ds
                .iter()
                .map(|&d| head.weight.iter().map(|w| d * w).collect())
                .collect();
            let ts: Vec<&ForwardTrace> = fs.iter().map(|(_, t)| t).collect();
            let gh: Vec<&[f64]> = grad_h.iter().map(Vec::as_slice).collect();
            params.backward_encoder_batch_into(&ts, &gh, &mut acc)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, reduce_chunks(params, parts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, StreamKey, SynthConfig};
    use crate::encoder::EncoderDims;
    use proptest::prelude::*;

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 0.01);
        assert_eq!(lr_at(&cfg, 99), 0.01);
        assert!((lr_at(&cfg, 100) - 0.001).abs() < 1e-18);
        assert!((lr_at(&cfg, 249) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn momentum_update_by_hand() {
        let dims = EncoderDims::new(1, vec![], 1).with_head(1, 1);
        let mut p = EncoderParams::init(dims, 0).unwrap();
        let w0 = p.layers[0].weight.get(0, 0);
        let mut g = p.zeros_like();
        g.layers[0].weight.set(0, 0, 2.0);
        let mut s = MomentumState::new(&p);
        sgd_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap();
        // v = 2, w = w0 - 0.2
        assert!((p.layers[0].weight.get(0, 0) - (w0 - 0.2)).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap();
        // v = 0.9*2 + 2 = 3.8, w = w0 - 0.2 - 0.38
        assert!((p.layers[0].weight.get(0, 0) - (w0 - 0.58)).abs() < 1e-15);
        assert!((s.velocity().layers[0].weight.get(0, 0) - 3.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let dims = EncoderDims::new(2, vec![3], 2).with_head(2, 2);
        let mut p = EncoderParams::init(dims, 1).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head_w2.set(0, 0, f64::NAN);
        let mut s = MomentumState::new(&p);
        let e = sgd_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap_err();
        assert!(matches!(e, Error::NonFinite(_)));
        assert_eq!(p, before);
    }

    #[test]
    fn sampling_with_and_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&mut rng, 10, 4, 10, 150).unwrap();
        let mut n = b.normals.clone();
        n.sort();
        assert_eq!(n, (0..10).collect::<Vec<_>>());
        assert_eq!(b.anomalies.len(), 150);
        assert!(b.anomalies.iter().all(|&i| i < 4));
        assert!(sample_batch(&mut rng, 0, 4, 1, 1).is_err());
        assert!(sample_batch(&mut rng, 3, 0, 1, 1).is_err());
    }

    #[test]
    fn uniform_batch_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        let batches = 10_000;
        for _ in 0..batches {
            for i in sample_batch(&mut rng, 10, 1, 5, 0).unwrap().normals {
                counts[i] += 1;
            }
        }
        let expected = (batches * 5) as f64 / 10.0;
        for c in counts {
            assert!((c as f64 - expected).abs() / expected < 0.05, "{counts:?}");
        }
    }

    fn tiny() -> (TrainConfig, ModelConfig, DatasetSplit) {
        let synth = SynthConfig {
            input_dim: 8,
            subject_style_dims: 4,
            train_subjects: 5,
            test_subjects: 2,
            train_normals_per_subject: 4,
            train_anomalies_per_subject: 2,
            test_normals_per_subject: 2,
            seen_classes: 2,
            unseen_classes: 2,
            streams: vec![StreamKey::ALL[0]],
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&synth).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_normals: 4,
            batch_anomalies: 6,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            hidden_sizes: vec![12],
            embed_dim: 10,
            head_hidden_dim: 10,
            proj_dim: 6,
        };
        (cfg, model, data)
    }

    #[test]
    fn training_is_reproducible_across_thread_counts() {
        let (cfg, model, data) = tiny();
        let a = train(&cfg, &model, &data).unwrap();
        let b = train(&TrainConfig { threads: 3, ..cfg.clone() }, &model, &data).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3 * 20usize.div_ceil(4));
        let c = train(&TrainConfig { seed: 1, ..cfg }, &model, &data).unwrap();
        assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
    }

    #[test]
    fn cross_entropy_objectives_train() {
        let (cfg, model, data) = tiny();
        for objective in [Objective::CrossEntropy, Objective::WeightedCrossEntropy] {
            let out = train(&TrainConfig { objective, ..cfg.clone() }, &model, &data).unwrap();
            assert!(out.checkpoint.params.logit_head.is_some());
            assert!(out.history.iter().all(|r| r.loss.is_finite()));
        }
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let (cfg, model, data) = tiny();
        let cfg = TrainConfig { lr0: 1e300, ..cfg };
        match train(&cfg, &model, &data).unwrap_err() {
            Error::Diverged { last_good, .. } => assert!(last_good.params.is_finite()),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn too_few_clips_is_a_data_error() {
        let (cfg, model, data) = tiny();
        let cfg = TrainConfig { batch_normals: 50, ..cfg };
        assert!(matches!(train(&cfg, &model, &data), Err(Error::Dataset(_))));
    }

    proptest! {
        #[test]
        fn tiny_lr_moves_weights_proportionally(lr in 1e-9f64..1e-6, gscale in 0.1f64..10.0) {
            let dims = EncoderDims::new(3, vec![4], 3).with_head(3, 2);
            let mut p = EncoderParams::init(dims, 5).unwrap();
            let before = p.clone();
            let mut g = p.zeros_like();
            for t in g.tensors_mut() {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = gscale * ((i % 7) as f64 - 3.0);
                }
            }
            let mut s = MomentumState::new(&p);
            sgd_step(&mut p, &g, &mut s, lr, 0.0).unwrap();
            for ((w, w0), gt) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
                for ((a, b), gi) in w.iter().zip(w0).zip(gt) {
                    prop_assert!(((b - a) - lr * gi).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }
}
