//! One-seed pipelines shared by the command-line runner, the FFI and the
//! acceptance suite: pretrain a model on a source split, then adapt a copy
//! of it to the target domain and measure the result.

use std::fmt::Write as _;
use std::path::Path;

use crate::adaptation::{
    adapt, dataset_bnm, evaluate, moving_average_non_decreasing, pretrain, split_and_freeze,
    AdaptConfig, MetricsRecord, PretrainConfig, PretrainRecord, StoredStats, METRICS_HEADER,
    PRETRAIN_HEADER,
};
use crate::data::{subsample_preserving_prior, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::io::{sig6, write_atomic};
use crate::nn::{Model, Topology};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Moving-average window and tail fraction of the monotone-trend flag.
pub const MONOTONE_WINDOW: usize = 5;
pub const MONOTONE_TAIL: f64 = 0.8;

const SUBSAMPLE_STREAM: u64 = 0x5353;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model,
    pub log: Vec<PretrainRecord>,
    pub source_acc: f64,
}

pub fn pretrain_seed(source: &Split, topology: &Topology, config: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    let mut model = Model::from_topology(topology, seed)?;
    let log = pretrain(&mut model, &source.train, Some(&source.test), config)?;
    let source_acc = evaluate(&mut model, &source.test)?;
    Ok(Pretrained {
        model,
        log,
        source_acc,
    })
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Model,
    pub stored: StoredStats,
    pub records: Vec<MetricsRecord>,
    pub effective_batch: usize,
    pub unadapted_acc: f64,
    pub adapted_acc: f64,
    /// Matching loss of the full target training features before and after.
    pub initial_bnm: f64,
    pub final_bnm: f64,
    pub monotone: bool,
}

/// Splits a copy of `pretrained` at `split_index` (default: last BN layer)
/// and adapts its encoder on `target_train`, which carries no labels.
pub fn adapt_model(
    pretrained: &Model,
    target_train: &Tensor,
    target_test: &LabeledDataset,
    split_index: Option<usize>,
    config: &AdaptConfig,
) -> Result<Adapted> {
    let mut model = pretrained.clone();
    let split = match split_index {
        Some(s) => s,
        None => model
            .last_bn_index()
            .ok_or_else(|| Error::config("split_index", "model has no batch-norm layer"))?,
    };
    let stored = split_and_freeze(&mut model, split, config.classifier_bn)?;
    let unadapted_acc = evaluate(&mut model, target_test)?;
    let initial_bnm = dataset_bnm(&mut model, target_train, &stored)?;
    let report = adapt(&mut model, target_train, Some(target_test), &stored, config)?;
    let adapted_acc = evaluate(&mut model, target_test)?;
    let final_bnm = dataset_bnm(&mut model, target_train, &stored)?;
    let accs: Vec<f64> = report.records.iter().map(|r| r.target_test_acc).collect();
    let monotone = moving_average_non_decreasing(&accs, MONOTONE_WINDOW, MONOTONE_TAIL);
    Ok(Adapted {
        model,
        stored,
        records: report.records,
        effective_batch: report.effective_batch,
        unadapted_acc,
        adapted_acc,
        initial_bnm,
        final_bnm,
        monotone,
    })
}

/// Features of a class-prior-preserving subset of the target training
/// split; `fraction = 1.0` returns every row in order.
pub fn target_subset(train: &LabeledDataset, fraction: f64, seed: u64) -> Result<Tensor> {
    let mut rng = RngState::with_stream(seed, SUBSAMPLE_STREAM);
    Ok(subsample_preserving_prior(train, fraction, &mut rng)?.features)
}

pub fn pretrain_metrics_csv(log: &[PretrainRecord]) -> String {
    let mut s = String::from(PRETRAIN_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.iteration,
            sig6(r.loss_ce),
            sig6(r.source_test_acc),
            sig6(r.seconds)
        );
    }
    s
}

pub fn adapt_metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration,
            sig6(r.loss_im),
            sig6(r.loss_bnm),
            sig6(r.loss_total),
            sig6(r.target_test_acc),
            sig6(r.seconds)
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
