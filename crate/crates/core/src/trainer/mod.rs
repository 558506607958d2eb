//! Supervised training with patch dropout: SGD with momentum, linear warmup,
//! label smoothing and early stopping on validation top-1.

pub mod dataset;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use dataset::{
    load_dataset, synthetic, Augment, Dataset, Splits, SyntheticSpec, SYNTHETIC_CLASSES,
};

use crate::error::{Error, Result};
use crate::model::{self, is_no_decay, EvalDropout, ModelConfig, ViTParams};
use crate::numerics::{meter, Ops, Tape};
use crate::sampler::{self, keyed_rng, KeepRate, SamplingSpec, Strategy};

use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// `None` trains on every patch without touching the sampler.
    pub sampling: Option<SamplingSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip decay on biases, norms, CLS and positional slots.
    pub decay_exempt: bool,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Stop after this many epochs without a new best val top-1.
    pub early_stop_patience: Option<usize>,
    pub augment: Augment,
}

impl TrainConfig {
    /// Defaults tuned for the synthetic benchmark.
    pub fn benchmark(model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            model,
            sampling: None,
            epochs: 12,
            batch_size: 32,
            base_lr: 0.05,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_exempt: false,
            label_smoothing: 0.1,
            seed,
            early_stop_patience: None,
            augment: Augment::default(),
        }
    }

    /// Adds patch dropout over the model's own patch grid.
    pub fn with_dropout(mut self, strategy: Strategy, rate: KeepRate) -> Result<Self> {
        let (rows, cols) = self.model.grid();
        self.sampling = Some(SamplingSpec::new(strategy, rate, self.seed, rows, cols)?);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0
        {
            return Err(Error::InvalidConfig(
                "lr must be positive, momentum in [0,1), decay non-negative".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup of {} epochs exceeds the {} training epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if let Some(spec) = &self.sampling {
            spec.rate.validate()?;
            if (spec.grid_rows, spec.grid_cols) != self.model.grid() {
                return Err(Error::InvalidConfig(
                    "sampling grid does not match the model's patch grid".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear warmup to `base_lr`, then flat.
pub fn lr_at(base_lr: f64, step: u64, warmup_steps: u64) -> f64 {
    if step < warmup_steps {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        base_lr
    }
}

/// Mean label-smoothed cross-entropy of `[B,K]` logits, computed on a
/// scratch tape.
pub fn smoothed_cross_entropy(
    logits: &crate::numerics::Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let loss = tape.smoothed_cross_entropy(&l, labels, alpha)?;
    Ok(tape.value(loss).data()[0])
}

/// One optimizer step as seen by the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub keep_rate: f64,
    /// Tokens per image entering the encoder, CLS included.
    pub seq_len: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    /// Forward FLOPs spent on training so far, counted as multiply-accumulates
    /// like [`crate::cost::empirical_flops`].
    pub cum_flops: u64,
    pub keep_rate_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const TRAINLOG_HEADER: &str = "epoch,split,loss,top1,cum_flops,keep_rate_mean";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAINLOG_HEADER}\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{},{:.6}",
                r.epoch, r.split, r.loss, r.top1, r.cum_flops, r.keep_rate_mean
            )
            .unwrap();
        }
        out
    }

    pub fn val_rows(&self) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(|r| r.split == "val")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best val top-1.
    pub best: ViTParams,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub log: TrainLog,
    /// Forward FLOPs spent on training up to and including the best epoch.
    pub flops_to_best: u64,
    pub total_flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
}

/// Plain cross-entropy and top-1 over `indices`, optionally with test-time
/// random patch dropout.
pub fn evaluate(
    params: &ViTParams,
    data: &Dataset,
    indices: &[usize],
    eval_drop: Option<(f64, u64)>,
    batch_size: usize,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation split".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for (b, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let images = data.batch(chunk)?;
        let drop = eval_drop.map(|(rate, seed)| EvalDropout {
            rate,
            seed,
            step: b as u64,
        });
        let probs = model::predict(params, &images, drop)?;
        let k = data.classes;
        for (row, &i) in probs.data().chunks(k).zip(chunk) {
            let label = data.labels[i];
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        loss: loss / indices.len() as f64,
        top1: correct as f64 / indices.len() as f64,
    })
}

/// First index of the maximum; ties go to the lower class.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Momentum SGD with decoupled-from-the-loss weight decay folded into the
/// velocity.
struct Sgd {
    velocity: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl Sgd {
    fn new(params: &ViTParams, cfg: &TrainConfig) -> Self {
        let named = params.named();
        Sgd {
            velocity: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            decay: named
                .iter()
                .map(|(n, _)| !(cfg.decay_exempt && is_no_decay(n)))
                .collect(),
        }
    }

    fn step(&mut self, params: &mut ViTParams, grads: &[&[f64]], lr: f64, momentum: f64, wd: f64) {
        let mut i = 0;
        params.tensors = params.tensors.map(|_, t| {
            let mut t = t.clone();
            let (v, g) = (&mut self.velocity[i], grads[i]);
            let wd = if self.decay[i] { wd } else { 0.0 };
            for ((theta, v), &g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + wd * *theta;
                *theta -= lr * *v;
            }
            i += 1;
            t
        });
    }
}

/// Trains from a fresh seeded init. Deterministic in `cfg` and `data`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Like [`train`], reporting each finished epoch to `on_epoch`.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let m = cfg.model;
    if (data.height, data.width, data.channels, data.classes)
        != (m.image_h, m.image_w, m.channels, m.classes)
    {
        return Err(Error::InvalidConfig(format!(
            "dataset is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
            data.height,
            data.width,
            data.channels,
            data.classes,
            m.image_h,
            m.image_w,
            m.channels,
            m.classes
        )));
    }
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs non-empty train and val splits".into(),
        ));
    }

    let mut params = ViTParams::init(m, cfg.seed)?;
    let mut opt = Sgd::new(&params, cfg);
    let steps_per_epoch = data.splits.train.len().div_ceil(cfg.batch_size) as u64;
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let n = m.num_patches();

    let mut log = TrainLog::default();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY, 0u64);
    let mut since_best = 0;
    let mut cum_macs = 0u64;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order = data.splits.train.clone();
        order.shuffle(&mut keyed_rng(&[cfg.seed, 0x7368_7566, epoch as u64]));
        let (mut loss_sum, mut correct, mut rate_sum, mut seen) = (0.0, 0usize, 0.0, 0usize);
        let steps_before = log.steps.len();

        for chunk in order.chunks(cfg.batch_size) {
            let images = data.batch_augmented(chunk, &cfg.augment, cfg.seed, epoch as u64)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let lr = lr_at(cfg.base_lr, step, warmup);
            let (rate, keep) = match &cfg.sampling {
                Some(spec) => (
                    sampler::rate_at(spec, step)?,
                    Some(sampler::draw_batch(spec, step, chunk.len())?),
                ),
                None => (1.0, None),
            };

            let mut tape = Tape::new();
            let pv = params.register(&mut tape, true);
            let (out, macs) = meter::measure(|| {
                model::logits_with_keep(&mut tape, &m, &pv, &images, keep.as_deref())
            });
            let (logits, seq_len) = out?;
            let expected = sampler::kept_count(rate, n) + 1;
            assert_eq!(
                seq_len, expected,
                "encoder saw {seq_len} tokens at keep rate {rate}"
            );
            let loss_var = tape.smoothed_cross_entropy(&logits, &labels, cfg.label_smoothing)?;
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch,
                    step: step as usize,
                    loss,
                });
            }
            cum_macs += macs;

            let grads = tape.backward(loss_var)?;
            let slots = pv.named();
            let grads: Vec<&[f64]> = slots
                .iter()
                .map(|(_, &v)| grads.get(v).expect("every parameter reaches the loss"))
                .collect();
            opt.step(&mut params, &grads, lr, cfg.momentum, cfg.weight_decay);

            for (row, &label) in tape.value(logits).data().chunks(m.classes).zip(&labels) {
                correct += usize::from(argmax(row) == label);
            }
            loss_sum += loss * chunk.len() as f64;
            rate_sum += rate;
            seen += chunk.len();
            log.steps.push(StepRecord {
                step,
                epoch,
                keep_rate: rate,
                seq_len,
                loss,
                lr,
            });
            step += 1;
        }

        let cum_flops = cum_macs;
        let train_row = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            top1: correct as f64 / seen as f64,
            cum_flops,
            keep_rate_mean: rate_sum / (log.steps.len() - steps_before) as f64,
        };
        on_epoch(&train_row);
        log.epochs.push(train_row);

        let val = evaluate(&params, data, &data.splits.val, None, 256)?;
        let val_row = EpochRecord {
            epoch,
            split: "val".into(),
            loss: val.loss,
            top1: val.top1,
            cum_flops,
            keep_rate_mean: 1.0,
        };
        on_epoch(&val_row);
        log.epochs.push(val_row);

        if val.top1 > best.2 {
            best = (params.clone(), epoch, val.top1, cum_flops);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let (best, best_epoch, best_val_top1, flops_to_best) = best;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_top1,
        log,
        flops_to_best,
        total_flops: cum_macs,
    })
}

#[cfg(test)]
mod tests;
