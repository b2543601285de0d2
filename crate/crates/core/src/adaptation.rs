//! Source pretraining and source-free adaptation of the feature encoder.
//!
//! Adaptation never sees source data: its only inputs are the pretrained
//! model, unlabeled target features and (for metrics only) a labeled target
//! test set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{
    bnm_loss, ce_smooth_loss, ce_smooth_loss_grad, joint_loss, joint_loss_grad, LossValue,
    StatPair, DEFAULT_LABEL_SMOOTHING, DEFAULT_LAMBDA,
};
use crate::nn::{AdamConfig, AdamState, ClassifierBn, Model, Phase};
use crate::rng::RngState;
use crate::tensor::Tensor;

const PRETRAIN_STREAM: u64 = 0x5052;
const ADAPT_STREAM: u64 = 0x4144;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub label_smoothing: f64,
    pub log_interval: usize,
    pub record_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 64,
            iterations: 1000,
            optimizer: AdamConfig::with_lr(1e-3),
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            log_interval: 50,
            record_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub classifier_bn: ClassifierBn,
    pub log_interval: usize,
    /// Write wall-clock seconds into metrics; off by default so repeated
    /// runs produce identical files.
    pub record_time: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda: DEFAULT_LAMBDA,
            batch_size: 64,
            iterations: 3000,
            optimizer: AdamConfig::with_lr(1e-4),
            classifier_bn: ClassifierBn::Frozen,
            log_interval: 50,
            record_time: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("adapt.lambda", "must be a finite value >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("adapt.batch_size", "must be >= 2"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("adapt.log_interval", "must be >= 1"));
        }
        Ok(())
    }
}

/// One logged adaptation step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub loss_im: f64,
    pub loss_bnm: f64,
    pub loss_total: f64,
    pub target_test_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "iteration,loss_im,loss_bnm,loss_total,target_test_acc,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub iteration: usize,
    pub loss_ce: f64,
    pub source_test_acc: f64,
    pub seconds: f64,
}

pub const PRETRAIN_HEADER: &str = "iteration,loss_ce,source_test_acc,seconds";

/// Classifier BN statistics captured when the model is split.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Shuffled epochs of fixed-size index batches; the incomplete tail of an
/// epoch is dropped.
#[derive(Debug)]
pub struct EpochBatcher {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: RngState,
}

impl EpochBatcher {
    pub fn new(n: usize, batch: usize, rng: RngState) -> Result<Self> {
        if batch == 0 || n < batch {
            return Err(Error::config(
                "batch_size",
                format!("{n} samples cannot fill a batch of {batch}"),
            ));
        }
        Ok(EpochBatcher {
            order: (0..n).collect(),
            batch,
            pos: n,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Argmax predictions in inference mode; ties go to the lowest class index.
pub fn predict_labels(model: &mut Model, x: &Tensor) -> Result<Vec<usize>> {
    let probs = model.predict(x, Phase::Eval)?;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
}

/// Fraction of correctly classified samples.
pub fn evaluate(model: &mut Model, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("evaluate: empty test set".into()));
    }
    let pred = predict_labels(model, &test.features)?;
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mini-batch Adam on label-smoothed cross-entropy over the whole model.
pub fn pretrain(
    model: &mut Model,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &PretrainConfig,
) -> Result<Vec<PretrainRecord>> {
    if config.log_interval == 0 {
        return Err(Error::config("pretrain.log_interval", "must be >= 1"));
    }
    if train.dim() != model.input_dim() || train.classes != model.classes() {
        return Err(Error::config(
            "model",
            format!(
                "model expects {} features / {} classes, data has {} / {}",
                model.input_dim(),
                model.classes(),
                train.dim(),
                train.classes
            ),
        ));
    }
    train.require_all_classes("source training split")?;
    if config.iterations == 0 {
        return Ok(Vec::new());
    }
    model.trainable.iter_mut().for_each(|t| *t = true);
    model.classifier_bn = None;
    let mut batcher = EpochBatcher::new(
        train.len(),
        config.batch_size,
        RngState::with_stream(model.seed, PRETRAIN_STREAM),
    )
    .map_err(|_| {
        Error::config(
            "pretrain.batch_size",
            format!(
                "{} training samples cannot fill a batch of {}",
                train.len(),
                config.batch_size
            ),
        )
    })?;
    let mut opt = AdamState::new(config.optimizer);
    let start = Instant::now();
    let mut log = Vec::new();
    for it in 1..=config.iterations {
        let idx = batcher.next_batch().to_vec();
        let x = train.features.select_rows(&idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        model.set_phase(Phase::Pretrain);
        let out = model.forward(&x)?;
        let loss = ce_smooth_loss(&out.probs, &labels, config.label_smoothing)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretrain loss at iteration {it}: {loss}")));
        }
        let g = ce_smooth_loss_grad(&out.probs, &labels, config.label_smoothing)?;
        model.backward(&g, None)?;
        opt.step(&mut model.trainable_params())?;
        if it % config.log_interval == 0 {
            let acc = match test {
                Some(t) => evaluate(model, t)?,
                None => f64::NAN,
            };
            log.push(PretrainRecord {
                iteration: it,
                loss_ce: loss,
                source_test_acc: acc,
                seconds: if config.record_time {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
        }
    }
    Ok(log)
}

/// Freezes every layer from `split_index` up and snapshots the leading
/// classifier BN statistics.
pub fn split_and_freeze(model: &mut Model, split_index: usize, classifier_bn: ClassifierBn) -> Result<StoredStats> {
    model.check_split(split_index)?;
    model.split_index = split_index;
    for (i, t) in model.trainable.iter_mut().enumerate() {
        *t = i < split_index;
    }
    model.classifier_bn = Some(classifier_bn);
    let bn = model.split_bn();
    Ok(StoredStats {
        mean: bn.running_mean.clone(),
        var: bn.running_var.clone(),
    })
}

/// Forward the adaptation objective on one batch and fill encoder gradients.
pub fn adaptation_gradients(
    model: &mut Model,
    batch: &Tensor,
    stored: &StoredStats,
    lambda: f64,
) -> Result<LossValue> {
    model.set_phase(Phase::Adapt);
    let out = model.forward(batch)?;
    let bn = model.split_bn();
    let stats = StatPair {
        batch_mean: &bn.batch_mean,
        batch_var: &bn.batch_var,
        stored_mean: &stored.mean,
        stored_var: &stored.var,
    };
    let loss = joint_loss(&out.probs, stats, lambda)?;
    let (g_probs, g_stats) = joint_loss_grad(&out.probs, stats, lambda)?;
    if loss.total.is_finite() {
        model.backward(&g_probs, Some(&g_stats))?;
    }
    Ok(loss)
}

/// Matching loss of the whole feature set in inference mode.
pub fn dataset_bnm(model: &mut Model, x: &Tensor, stored: &StoredStats) -> Result<f64> {
    model.set_phase(Phase::Eval);
    model.forward(x)?;
    let bn = model.split_bn();
    bnm_loss(StatPair {
        batch_mean: &bn.batch_mean,
        batch_var: &bn.batch_var,
        stored_mean: &stored.mean,
        stored_var: &stored.var,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub records: Vec<MetricsRecord>,
    /// Requested batch size clamped to the number of target samples.
    pub effective_batch: usize,
}

/// Minimizes `L_IM + λ·L_BNM` over the encoder of a split model.
///
/// `eval` is used only to fill the accuracy column of the metrics log.
pub fn adapt(
    model: &mut Model,
    target: &Tensor,
    eval: Option<&LabeledDataset>,
    stored: &StoredStats,
    config: &AdaptConfig,
) -> Result<AdaptReport> {
    config.validate()?;
    if !model.is_adapting() {
        return Err(Error::State("adapt requires split_and_freeze first".into()));
    }
    if target.cols() != model.input_dim() {
        return Err(Error::dim("adapt", target.shape(), &[target.rows(), model.input_dim()]));
    }
    if target.rows() < 2 {
        return Err(Error::config("target", "need at least 2 target samples"));
    }
    let batch = config.batch_size.min(target.rows());
    let mut batcher = EpochBatcher::new(
        target.rows(),
        batch,
        RngState::with_stream(model.seed, ADAPT_STREAM),
    )?;
    let mut opt = AdamState::new(config.optimizer);
    let start = Instant::now();
    let mut records = Vec::with_capacity(config.iterations / config.log_interval);
    for it in 1..=config.iterations {
        let idx = batcher.next_batch().to_vec();
        let x = target.select_rows(&idx)?;
        let loss = adaptation_gradients(model, &x, stored, config.lambda)?;
        let (im, bnm) = (loss.im.unwrap_or(f64::NAN), loss.bnm.unwrap_or(f64::NAN));
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "adaptation loss at iteration {it}: total={} im={im} bnm={bnm}",
                loss.total
            )));
        }
        opt.step(&mut model.trainable_params())?;
        if it % config.log_interval == 0 {
            let acc = match eval {
                Some(t) => evaluate(model, t)?,
                None => f64::NAN,
            };
            records.push(MetricsRecord {
                iteration: it,
                loss_im: im,
                loss_bnm: bnm,
                loss_total: loss.total,
                target_test_acc: acc,
                seconds: if config.record_time {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
        }
    }
    Ok(AdaptReport {
        records,
        effective_batch: batch,
    })
}

/// Whether the `window`-point trailing moving average of `values` never
/// decreases over the last `tail` fraction of the series.
pub fn moving_average_non_decreasing(values: &[f64], window: usize, tail: f64) -> bool {
    if window == 0 || values.len() < window {
        return true;
    }
    let ma: Vec<(usize, f64)> = (window - 1..values.len())
        .map(|t| (t, values[t + 1 - window..=t].iter().sum::<f64>() / window as f64))
        .collect();
    let first = ((1.0 - tail) * values.len() as f64 + 1e-9).floor() as usize;
    ma.windows(2)
        .filter(|w| w[0].0 >= first)
        .all(|w| w[1].1 >= w[0].1 - 1e-12)
}

/// Mean and sample standard deviation (n − 1 divisor; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
