//! Mini-batch SGD with Nesterov momentum and the three training protocols:
//! self-supervised pretraining, joint training and classification-only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{forward, ForwardOptions, ModelParams, SectionGroup};
use crate::rng::{domain, SplitMix64};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Frame prediction only; the classification head is frozen and not evaluated.
    Pretrain,
    /// `alpha·L_fp + beta·L_cls`.
    Joint,
    /// Joint objective with `alpha = 0`.
    ClsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub mode: TrainMode,
    /// Learning-rate drops (×0.1 each) as fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 10,
            loss: LossConfig::default(),
            mode: TrainMode::Joint,
            milestones: vec![0.5, 0.75],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("train config", m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        self.loss.validate()
    }

    /// Loss weights actually applied under `mode`.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            TrainMode::Pretrain => LossConfig { beta: 0.0, ..self.loss },
            TrainMode::Joint => self.loss,
            TrainMode::ClsOnly => LossConfig { alpha: 0.0, ..self.loss },
        }
    }
}

/// `base_lr · 0.1^k` where `k` counts milestones already reached. Milestone
/// epochs are `round(fraction · total_epochs)`, never earlier than epoch 1.
pub fn lr_schedule(epoch: usize, base_lr: f64, total_epochs: usize, milestones: &[f64]) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| {
            let at = ((m * total_epochs as f64).round() as usize).max(1);
            epoch >= at
        })
        .count();
    base_lr * 0.1f64.powi(passed as i32)
}

/// Momentum buffers, one per parameter section.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<S> {
    buffers: Vec<Vec<S>>,
}

impl<S: Scalar> Velocity<S> {
    pub fn zeros(params: &ModelParams<S>) -> Self {
        Velocity {
            buffers: params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect(),
        }
    }

    pub fn section(&self, idx: usize) -> &[S] {
        &self.buffers[idx]
    }
}

/// One Nesterov update on the sections selected by `mask`:
///
/// ```text
/// g' = g + wd·w
/// v  = μ·v + g'
/// w  = w − lr·(g' + μ·v)
/// ```
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    velocity: &mut Velocity<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || mask.len() != params.len() {
        return Err(Error::invalid("sgd_step", "gradient / mask count differs from parameter sections"));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    let (lr, mu, wd) = (S::lit(lr), S::lit(momentum), S::lit(weight_decay));
    for (i, g) in grads.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let w = params.tensor_mut(i).data_mut();
        if g.len() != w.len() {
            return Err(Error::invalid("sgd_step", format!("section {i}: gradient length mismatch")));
        }
        let v = &mut velocity.buffers[i];
        for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            let gp = gi + wd * *wi;
            *vi = mu * *vi + gp;
            *wi -= lr * (gp + mu * *vi);
        }
    }
    Ok(())
}

/// Losses and gradients of one clip.
pub struct ClipGradient<S> {
    pub grads: Vec<Option<Vec<S>>>,
    pub loss_fp: f64,
    pub loss_cls: Option<f64>,
    pub correct: Option<bool>,
}

pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Forward + backward of the objective for `mode` on one `(T+1)`-frame clip.
pub fn clip_gradient<S: Scalar>(
    params: &ModelParams<S>,
    clip: &crate::tensor::Tensor<S>,
    label: usize,
    loss: &LossConfig,
    mode: TrainMode,
    mask: &[bool],
) -> Result<ClipGradient<S>> {
    let classify = mode != TrainMode::Pretrain;
    let mut fw = forward(
        params,
        clip,
        &ForwardOptions {
            classify,
            trainable: Some(mask),
        },
    )?;
    let l_fp = fw.loss_fp(loss)?;
    let loss_fp = fw.graph.value(l_fp).item()?.to_f64_lossy();
    let (total, loss_cls, correct) = if classify {
        let l_cls = fw.loss_cls(label)?;
        let pred = argmax(fw.graph.value(fw.class_logits.expect("classifier built")).data());
        let lc = fw.graph.value(l_cls).item()?.to_f64_lossy();
        (fw.graph.total_loss(l_fp, l_cls, loss)?, Some(lc), Some(pred == label))
    } else {
        (fw.graph.scale(l_fp, S::lit(loss.alpha))?, None, None)
    };
    fw.graph.backward(total)?;
    Ok(ClipGradient {
        grads: fw.take_gradients(),
        loss_fp,
        loss_cls,
        correct,
    })
}

/// Per-epoch metrics; serialized as one JSON line per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_fp: f64,
    pub loss_cls: Option<f64>,
    pub loss_total: f64,
    pub train_acc: Option<f64>,
}

pub struct TrainRun<S> {
    pub params: ModelParams<S>,
    pub trace: Vec<EpochRecord>,
    /// Mean classification loss of the first mini-batch, before any update.
    pub first_batch_loss_cls: Option<f64>,
}

fn check_dims<S: Scalar>(params: &ModelParams<S>, data: &Dataset) -> Result<()> {
    let c = params.config();
    let h = &data.header;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if h.frames_stored != c.frames + 1 || h.height != c.height || h.width != c.width {
        return Err(Error::DatasetMismatch(format!(
            "dataset clips are {}x{}x{}, model expects {}x{}x{}",
            h.frames_stored,
            h.height,
            h.width,
            c.frames + 1,
            c.height,
            c.width
        )));
    }
    Ok(())
}

fn run<S: Scalar>(mut params: ModelParams<S>, data: &Dataset, cfg: &TrainConfig, mask: Vec<bool>) -> Result<TrainRun<S>> {
    cfg.validate()?;
    check_dims(&params, data)?;
    let loss = cfg.effective_loss();
    let clips: Vec<_> = data.clips.iter().map(|c| c.frames.cast::<S>()).collect();
    let mut velocity = Velocity::zeros(&params);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut first_batch_loss_cls = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.epochs, &cfg.milestones);
        let order = SplitMix64::stream(cfg.seed, domain::SHUFFLE, epoch as u64).permutation(data.len());
        let (mut sum_fp, mut sum_cls, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<ClipGradient<S>>> = batch
                .par_iter()
                .map(|&i| clip_gradient(&params, &clips[i], data.clips[i].label, &loss, cfg.mode, &mask))
                .collect();
            let norm = S::lit(batch.len() as f64);
            let mut grads: Vec<Vec<S>> = params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
            let mut batch_cls = 0.0;
            for r in results {
                let r = r?;
                sum_fp += r.loss_fp;
                if let Some(l) = r.loss_cls {
                    sum_cls += l;
                    batch_cls += l;
                }
                correct += usize::from(r.correct == Some(true));
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    if let Some(g) = g {
                        acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            if first_batch_loss_cls.is_none() && cfg.mode != TrainMode::Pretrain {
                first_batch_loss_cls = Some(batch_cls / batch.len() as f64);
            }
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v /= norm);
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay, &mask)?;
        }
        let n = data.len() as f64;
        let loss_fp = sum_fp / n;
        let (loss_cls, train_acc) = if cfg.mode == TrainMode::Pretrain {
            (None, None)
        } else {
            (Some(sum_cls / n), Some(correct as f64 / n))
        };
        trace.push(EpochRecord {
            epoch,
            lr,
            loss_fp,
            loss_cls,
            loss_total: loss.alpha * loss_fp + loss.beta * loss_cls.unwrap_or(0.0),
            train_acc,
        });
    }
    Ok(TrainRun {
        params,
        trace,
        first_batch_loss_cls,
    })
}

/// Self-supervised training of trunk and filter head on frame prediction.
/// Labels are ignored and classification sections stay bitwise unchanged.
pub fn pretrain<S: Scalar>(params: ModelParams<S>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun<S>> {
    let cfg = TrainConfig {
        mode: TrainMode::Pretrain,
        ..cfg.clone()
    };
    let mask = params.mask(&[SectionGroup::Trunk, SectionGroup::FilterHead]);
    run(params, data, &cfg, mask)
}

/// End-to-end training of every section (`Joint` or `ClsOnly` mode).
pub fn train_joint<S: Scalar>(params: ModelParams<S>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun<S>> {
    if cfg.mode == TrainMode::Pretrain {
        return Err(Error::invalid("train_joint", "use pretrain() for the pretrain mode"));
    }
    if data.header.num_classes != params.config().num_classes {
        return Err(Error::DatasetMismatch(format!(
            "dataset has {} classes, model has {}",
            data.header.num_classes,
            params.config().num_classes
        )));
    }
    let mask = vec![true; params.len()];
    run(params, data, cfg, mask)
}
