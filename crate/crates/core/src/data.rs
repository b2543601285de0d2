//! Synthetic covariate-shift datasets, CSV ingestion and prior-preserving
//! subsampling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, domain: Domain, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::dim(
                "LabeledDataset::new",
                features.shape(),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Contract("dataset features must be finite".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            domain,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain: self.domain,
            classes: self.classes,
        })
    }

    /// Errors unless every class has at least one sample.
    pub fn require_all_classes(&self, what: &str) -> Result<()> {
        if let Some(c) = self.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Contract(format!("{what}: class {c} has no samples")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub radius: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            dim: 2,
            n_per_class: 200,
            spread: 0.35,
            radius: 2.0,
        }
    }
}

impl BlobSpec {
    /// Class means evenly spaced on a ring in the first two axes.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / self.classes as f64;
                let mut m = vec![0.0; self.dim];
                m[0] = self.radius * angle.cos();
                m[1] = self.radius * angle.sin();
                m
            })
            .collect()
    }
}

/// Isotropic Gaussian clusters, one per class, grouped by class.
pub fn make_blobs(rng: &mut RngState, spec: &BlobSpec, domain: Domain) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.dim < 2 || spec.n_per_class == 0 {
        return Err(Error::Parameter(format!(
            "make_blobs needs classes >= 2, dim >= 2, n_per_class >= 1, got {spec:?}"
        )));
    }
    if !(spec.spread >= 0.0) || !spec.spread.is_finite() || !(spec.radius > 0.0) {
        return Err(Error::Parameter(format!(
            "make_blobs needs spread >= 0 and radius > 0, got {spec:?}"
        )));
    }
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in spec.class_means().iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for m in mean {
                data.push(m + spec.spread * rng.standard_normal());
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, spec.dim, data)?, labels, domain, spec.classes)
}

/// `x' = R·(s ⊙ x) + t + noise`, rotating the first two axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: Vec<f64>,
    pub noise_std: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation: 50f64.to_radians(),
            translation: vec![1.5, -0.5],
            scale: vec![1.2, 0.8],
            noise_std: 0.05,
        }
    }
}

impl ShiftSpec {
    pub fn identity(dim: usize) -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: vec![1.0; dim],
            noise_std: 0.0,
        }
    }
}

pub fn apply_shift(ds: &LabeledDataset, spec: &ShiftSpec, rng: &mut RngState) -> Result<LabeledDataset> {
    let d = ds.dim();
    if spec.translation.len() != d || spec.scale.len() != d {
        return Err(Error::Parameter(format!(
            "shift spec has translation/scale lengths {}/{} but data has {d} features",
            spec.translation.len(),
            spec.scale.len()
        )));
    }
    if spec.scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter("shift scale factors must be > 0".into()));
    }
    if !(spec.noise_std >= 0.0) || !spec.rotation.is_finite() {
        return Err(Error::Parameter("shift needs finite rotation and noise_std >= 0".into()));
    }
    let (sin, cos) = spec.rotation.sin_cos();
    let mut out = ds.features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, s) in row.iter_mut().zip(&spec.scale) {
            *v *= s;
        }
        if spec.rotation != 0.0 {
            let (x, y) = (row[0], row[1]);
            row[0] = cos * x - sin * y;
            row[1] = sin * x + cos * y;
        }
        for (v, t) in row.iter_mut().zip(&spec.translation) {
            *v += t;
        }
        if spec.noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += spec.noise_std * rng.standard_normal();
            }
        }
    }
    LabeledDataset::new(out, ds.labels.clone(), ds.domain, ds.classes)
}

fn indices_by_class(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Stratified split; each class contributes `round(n_k · train_fraction)`
/// samples to the train part. Both parts keep the original row order.
pub fn train_test_split(
    ds: &LabeledDataset,
    train_fraction: f64,
    rng: &mut RngState,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, mut idx) in indices_by_class(ds).into_iter().enumerate() {
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::Contract(format!(
                "class {k} with {} samples cannot be split at {train_fraction}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select(&train)?, ds.select(&test)?))
}

/// Random subset keeping the class prior.
///
/// The total is `round(N · fraction)`. Each class first gets
/// `floor(n_k · fraction)`; the remaining slots go one each to the largest
/// classes (ties to the lower class index). Selected rows keep their original
/// order, so `fraction = 1.0` returns the dataset unchanged.
pub fn subsample_preserving_prior(
    ds: &LabeledDataset,
    fraction: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let counts = ds.class_counts();
    let mut take: Vec<usize> = counts
        .iter()
        .map(|&n| (n as f64 * fraction).floor() as usize)
        .collect();
    let total = (ds.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..ds.classes).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if take[c] < counts[c] {
            take[c] += 1;
            remaining -= 1;
        }
    }
    if let Some(c) = (0..ds.classes).find(|&c| counts[c] > 0 && take[c] == 0) {
        return Err(Error::Contract(format!(
            "fraction {fraction} leaves class {c} ({} samples) empty",
            counts[c]
        )));
    }
    let mut chosen = Vec::with_capacity(total);
    for (k, mut idx) in indices_by_class(ds).into_iter().enumerate() {
        rng.shuffle(&mut idx);
        chosen.extend_from_slice(&idx[..take[k]]);
    }
    chosen.sort_unstable();
    ds.select(&chosen)
}

/// Writes `f1,…,fd,label` rows under a header line. Floats use the shortest
/// round-trip representation.
pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let mut s = String::new();
    for j in 0..ds.dim() {
        write!(s, "f{},", j + 1).unwrap();
    }
    s.push_str("label\n");
    for (i, &l) in ds.labels.iter().enumerate() {
        for v in ds.features.row(i) {
            write!(s, "{v},").unwrap();
        }
        writeln!(s, "{l}").unwrap();
    }
    s
}

pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv_string(ds).as_bytes())
}

pub fn parse_csv(text: &str, domain: Domain) -> Result<LabeledDataset> {
    let mut rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let any_numeric = fields.iter().any(|f| f.parse::<f64>().is_ok());
        if rows.is_empty() && width.is_none() && !any_numeric {
            // header
            width = Some(fields.len());
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if fields.len() < 2 {
            return Err(parse_err("need at least one feature and a label".into()));
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(parse_err(format!("{} fields, expected {w}", fields.len())));
            }
        }
        width = Some(fields.len());
        let (feat, label) = fields.split_at(fields.len() - 1);
        let values = feat
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("feature `{f}` is not a finite number"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let label: usize = label[0]
            .parse()
            .map_err(|_| parse_err(format!("label `{}` is not a non-negative integer", label[0])))?;
        rows.push((line_no, values, label));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let classes = rows.iter().map(|r| r.2).max().unwrap() + 1;
    if classes < 2 {
        return Err(Error::Parse {
            line: rows[0].0,
            message: format!("inferred {classes} class(es); at least 2 are required"),
        });
    }
    let d = rows[0].1.len();
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (_, v, l) in rows {
        data.extend(v);
        labels.push(l);
    }
    LabeledDataset::new(Tensor::matrix(n, d, data)?, labels, domain, classes)
}

pub fn load_csv(path: &Path, domain: Domain) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, domain)
}

/// Source and target domains of one synthetic shift problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBenchmark {
    pub seed: u64,
    pub blobs: BlobSpec,
    pub shift: ShiftSpec,
    pub train_fraction: f64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        SyntheticBenchmark {
            seed: 2024,
            blobs: BlobSpec::default(),
            shift: ShiftSpec::default(),
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl SyntheticBenchmark {
    /// No covariate shift at all: target drawn from the source distribution.
    pub fn without_shift(mut self) -> Self {
        self.shift = ShiftSpec::identity(self.blobs.dim);
        self
    }

    fn domain(&self, domain: Domain) -> Result<Split> {
        let base = match domain {
            Domain::Source => 0,
            Domain::Target => 10,
        };
        let mut gen = RngState::with_stream(self.seed, base + 1);
        let mut noise = RngState::with_stream(self.seed, base + 2);
        let mut split = RngState::with_stream(self.seed, base + 3);
        let mut ds = make_blobs(&mut gen, &self.blobs, domain)?;
        if domain == Domain::Target {
            ds = apply_shift(&ds, &self.shift, &mut noise)?;
        }
        let (train, test) = train_test_split(&ds, self.train_fraction, &mut split)?;
        Ok(Split { train, test })
    }

    pub fn source(&self) -> Result<Split> {
        self.domain(Domain::Source)
    }

    /// Target samples are drawn independently of the source samples.
    pub fn target(&self) -> Result<Split> {
        self.domain(Domain::Target)
    }
}
