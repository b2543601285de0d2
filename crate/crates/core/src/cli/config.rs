//! Per-command JSON run configurations.
//!
//! Every schema rejects unknown keys and gives each field a default except
//! `out_dir`, which has to come from the file or `--out`. The adapt schema
//! carries no source-data field: the command cannot be pointed at source
//! samples.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptConfig, PretrainConfig};
use crate::data::SyntheticBenchmark;
use crate::error::{Error, Result};
use crate::nn::Topology;

/// Optional CSV files replacing the synthetic generator for one domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataFiles {
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRun {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub benchmark: SyntheticBenchmark,
    pub source: DataFiles,
    pub model: Topology,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        PretrainRun {
            seeds: vec![0],
            out_dir: None,
            jobs: 1,
            benchmark: SyntheticBenchmark::default(),
            source: DataFiles::default(),
            model: Topology::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptRun {
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    /// A checkpoint file, or a pretrain output directory.
    pub checkpoint: Option<PathBuf>,
    /// Overrides the shuffling seed stored in the checkpoint.
    pub seed: Option<u64>,
    /// Defaults to the model's last BN layer.
    pub split_index: Option<usize>,
    /// Generator for the target domain when no target CSV is given.
    pub benchmark: SyntheticBenchmark,
    pub target: DataFiles,
    pub adapt: AdaptConfig,
}

impl Default for AdaptRun {
    fn default() -> Self {
        AdaptRun {
            out_dir: None,
            jobs: 1,
            checkpoint: None,
            seed: None,
            split_index: None,
            benchmark: SyntheticBenchmark::default(),
            target: DataFiles::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub benchmark: SyntheticBenchmark,
    pub domain: crate::data::Domain,
    pub test_csv: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            out_dir: None,
            checkpoint: None,
            benchmark: SyntheticBenchmark::default(),
            domain: crate::data::Domain::Target,
            test_csv: None,
        }
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.01, 0.1, 0.2, 1.0, 10.0, 50.0, 100.0];
pub const DEFAULT_FRACTION_GRID: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRun {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub benchmark: SyntheticBenchmark,
    pub model: Topology,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub lambdas: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Default for SweepRun {
    fn default() -> Self {
        SweepRun {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
            jobs: 1,
            benchmark: SyntheticBenchmark::default(),
            model: Topology::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            fractions: DEFAULT_FRACTION_GRID.to_vec(),
        }
    }
}

/// Reads a config file, or returns defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // serde reports unknown keys as "unknown field `x`, expected ..."
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("config")
            .to_string();
        Error::Config {
            field,
            message: msg,
        }
    })
}

pub fn require_out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::config("out_dir", "no output directory; set `out_dir` or pass --out"))
}

pub fn require_jobs(jobs: usize) -> Result<usize> {
    if jobs == 0 {
        return Err(Error::config("jobs", "must be >= 1"));
    }
    Ok(jobs)
}
