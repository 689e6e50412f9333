//! Frame-level cross-entropy, SGD with L2 decay, and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::network::{Gradients, StackedNetwork};
use crate::numerics::Vector;
use crate::params::{ParamSet, TensorRole};
use crate::rng::{seeded_stream, stream};
use crate::tasks::SequenceSample;

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, Vector::from(grad)))
}

pub fn cross_entropy(logits: &Vector, label: usize) -> Result<f64> {
    softmax_cross_entropy(logits, label).map(|(loss, _)| loss)
}

/// `p ← p(1 - lr·λ) - lr·g` on weight matrices, `p ← p - lr·g` on biases
/// and peepholes.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, lr: f64, l2_lambda: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    let param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} gradient tensors for {} parameters", grad_tensors.len(), param_tensors.len()),
        ));
    }
    for (p, g) in param_tensors.into_iter().zip(grad_tensors) {
        if p.shape != g.shape {
            return Err(Error::dim(
                "sgd_step",
                format!("{} is {:?} but its gradient is {:?}", p.name, p.shape, g.shape),
            ));
        }
        let decay = if p.role == TensorRole::Weight {
            1.0 - lr * l2_lambda
        } else {
            1.0
        };
        for (w, dw) in p.data.iter_mut().zip(g.data) {
            *w = *w * decay - lr * dw;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub bptt_len: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Halve the learning rate whenever the CV loss fails to improve.
    pub lr_halving: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            l2_lambda: 0.0,
            bptt_len: 20,
            epochs: 10,
            seed: 0,
            lr_halving: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!("l2_lambda must be >= 0, got {}", self.l2_lambda)));
        }
        if self.bptt_len == 0 {
            return Err(Error::Config("bptt_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_ce: f64,
    pub cv_ce: f64,
    /// CV frame accuracy.
    pub frame_acc: f64,
    pub seconds: f64,
}

/// Mean cross-entropy and frame accuracy over every frame of every
/// sequence. Parameters are only read.
pub fn evaluate(net: &StackedNetwork, dataset: &[SequenceSample]) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for sample in dataset {
        let logits = net.predict(&sample.frames)?;
        for (z, &y) in logits.iter().zip(&sample.labels) {
            loss += cross_entropy(z, y)?;
            correct += usize::from(z.argmax() == y);
            frames += 1;
        }
    }
    Ok((loss / frames as f64, correct as f64 / frames as f64))
}

pub fn train(
    net: &mut StackedNetwork,
    train_set: &[SequenceSample],
    cv_set: &[SequenceSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    train_with_progress(net, train_set, cv_set, cfg, |_| {})
}

/// Per-sequence SGD; `on_epoch` sees each epoch's metrics as they land.
pub fn train_with_progress(
    net: &mut StackedNetwork,
    train_set: &[SequenceSample],
    cv_set: &[SequenceSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() || cv_set.is_empty() {
        return Err(Error::Config("training and CV sets must be non-empty".into()));
    }
    let mut rng = seeded_stream(cfg.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut best_cv = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut frames = 0usize;
        for &idx in &order {
            let sample = &train_set[idx];
            let (loss, grads): (f64, Gradients) = net.loss_and_grads(&sample.frames, &sample.labels, cfg.bptt_len)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at epoch {epoch}, sequence {idx}"
                )));
            }
            sgd_step(&mut net.params, &grads, lr, cfg.l2_lambda)?;
            loss_sum += loss * sample.len() as f64;
            frames += sample.len();
        }
        let (cv_ce, frame_acc) = evaluate(net, cv_set)?;
        if !cv_ce.is_finite() {
            return Err(Error::NonFinite(format!("CV loss is {cv_ce} at epoch {epoch}")));
        }
        if cfg.lr_halving && cv_ce >= best_cv {
            lr *= 0.5;
        }
        best_cv = best_cv.min(cv_ce);
        let metrics = EpochMetrics {
            epoch,
            train_ce: loss_sum / frames as f64,
            cv_ce,
            frame_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

pub const METRICS_HEADER: &str = "epoch,train_ce,cv_ce,frame_acc,seconds";

/// Metrics CSV. With `record_time == false` the seconds column is written
/// as 0 so that identical runs produce identical files.
pub fn metrics_csv(metrics: &[EpochMetrics], record_time: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let seconds = if record_time { m.seconds } else { 0.0 };
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.train_ce, m.cv_ce, m.frame_acc, seconds);
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics], record_time: bool) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics, record_time)).map_err(|e| Error::io(path, e))
}
