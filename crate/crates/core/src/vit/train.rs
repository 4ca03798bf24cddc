use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ToyViTConfig;
use super::model::{forward, loss_and_grads};
use super::params::ToyViTParams;
use super::synth::SyntheticSample;
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::metrics::{patch_score, point_in_box};
use crate::tensor::Tensor;

/// Optimiser settings for SGD with momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, momentum: 0.9, batch_size: 32, grad_clip: Some(1.0), seed: 0 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Held-out top-1 accuracy in `[0, 1]`.
    pub top1: f64,
    /// Held-out Point-in-Box in `[0, 1]`.
    pub pib: f64,
}

/// Held-out accuracy and Point-in-Box of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub pib: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ToyViTParams,
    pub log: Vec<EpochLog>,
}

/// Accuracy, and the fraction of samples whose highest Patch Score lies in the box.
///
/// Samples are evaluated independently under `exec` and tallied in order.
pub fn evaluate(params: &ToyViTParams, cfg: &ToyViTConfig, samples: &[SyntheticSample], exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate on an empty set"));
    }
    let per_sample = exec
        .map(samples, |s| -> Result<(bool, bool)> {
            let out = forward(&s.image, params, cfg)?;
            let score = patch_score(&out.features, &out.global)?;
            Ok((out.predicted() == s.label, point_in_box(&score, &s.fg_box)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    Ok(EvalReport {
        top1: per_sample.iter().filter(|r| r.0).count() as f64 / n,
        pib: per_sample.iter().filter(|r| r.1).count() as f64 / n,
    })
}

fn accumulate(acc: &mut ToyViTParams, g: &ToyViTParams) {
    for (a, b) in acc.slots_mut().into_iter().zip(g.slots()) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

fn global_norm(p: &ToyViTParams) -> f64 {
    p.slots().iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Train with cross-entropy and SGD + momentum, logging held-out metrics after
/// every epoch.
///
/// Per-sample gradients may be computed in parallel under `exec`; they are
/// always reduced in sample order, so results are bit-identical across
/// execution modes and thread counts.
pub fn train(
    cfg: &ToyViTConfig,
    train_set: &[SyntheticSample],
    heldout: &[SyntheticSample],
    opts: &TrainOptions,
    exec: Execution,
) -> Result<TrainResult> {
    train_from(ToyViTParams::init(cfg)?, cfg, train_set, heldout, opts, exec, |_| {})
}

/// [`train`] from given initial parameters, reporting each epoch to `on_epoch`.
pub fn train_from(
    mut params: ToyViTParams,
    cfg: &ToyViTConfig,
    train_set: &[SyntheticSample],
    heldout: &[SyntheticSample],
    opts: &TrainOptions,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if opts.batch_size == 0 || !(opts.lr >= 0.0) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(invalid("batch size must be positive, lr non-negative, momentum in [0, 1)"));
    }
    if let Some(c) = opts.grad_clip {
        if !(c > 0.0) {
            return Err(invalid("gradient clip must be positive"));
        }
    }
    if let Some(s) = train_set.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(invalid(format!("sample {} has label {} >= {} classes", s.id, s.label, cfg.num_classes)));
    }
    let eval_set = if heldout.is_empty() { train_set } else { heldout };
    let mut velocity = params.map(|t| Tensor::zeros(t.shape()));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut sample_loss = vec![0.0; train_set.len()];
        for batch in order.chunks(opts.batch_size) {
            let results = exec
                .map(batch, |&i| loss_and_grads(&train_set[i].image, train_set[i].label, &params, cfg))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut grad = params.map(|t| Tensor::zeros(t.shape()));
            let mut batch_loss = 0.0;
            for (r, &i) in results.iter().zip(batch) {
                batch_loss += r.loss;
                sample_loss[i] = r.loss;
                accumulate(&mut grad, &r.grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(c) = opts.grad_clip {
                let norm = global_norm(&grad) * scale;
                if norm > c {
                    scale *= c / norm;
                }
            }
            for ((p, v), g) in params.slots_mut().into_iter().zip(velocity.slots_mut()).zip(grad.slots()) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = opts.momentum * *vv + gv * scale;
                    *pv -= opts.lr * *vv;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let eval = evaluate(&params, cfg, eval_set, exec)?;
        // Summed in sample-id order so the value does not depend on the shuffle.
        let loss = sample_loss.iter().sum::<f64>() / train_set.len() as f64;
        let entry = EpochLog { epoch, loss, top1: eval.top1, pib: eval.pib };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainResult { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{gen_synthetic, HeadType, SynthConfig};

    fn tiny() -> (ToyViTConfig, Vec<SyntheticSample>) {
        let cfg = ToyViTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            head: HeadType::Gap,
            window_schedule: vec![None],
            ..Default::default()
        };
        let data = gen_synthetic(
            16,
            &SynthConfig { grid: 4, patch_size: 2, channels: 1, classes: 2, fg_min: 1, fg_max: 2, noise_level: 0.1, seed: 3 },
        )
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (cfg, data) = tiny();
        let opts = TrainOptions { epochs: 2, lr: 0.0, ..Default::default() };
        let r = train(&cfg, &data, &[], &opts, Execution::Sequential).unwrap();
        assert_eq!(r.params, ToyViTParams::init(&cfg).unwrap());
        assert_eq!(r.log[0].loss, r.log[1].loss);
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let (cfg, data) = tiny();
        let opts = TrainOptions { epochs: 2, batch_size: 4, ..Default::default() };
        let a = train(&cfg, &data, &data[..4], &opts, Execution::Sequential).unwrap();
        let b = train(&cfg, &data, &data[..4], &opts, Execution::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn loss_decreases() {
        let (cfg, data) = tiny();
        let opts = TrainOptions { epochs: 15, batch_size: 4, ..Default::default() };
        let r = train(&cfg, &data, &[], &opts, Execution::default()).unwrap();
        assert!(r.log.last().unwrap().loss < r.log[0].loss);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, data) = tiny();
        let opts = TrainOptions::default();
        assert!(train(&cfg, &[], &[], &opts, Execution::Sequential).is_err());
        let bad = TrainOptions { batch_size: 0, ..Default::default() };
        assert!(train(&cfg, &data, &[], &bad, Execution::Sequential).is_err());
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let (cfg, data) = tiny();
        let opts = TrainOptions { epochs: 50, lr: 1e150, grad_clip: None, ..Default::default() };
        match train(&cfg, &data, &[], &opts, Execution::Sequential) {
            Err(Error::Diverged { .. }) => {}
            Err(e) if cfg!(debug_assertions) && matches!(e, Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
