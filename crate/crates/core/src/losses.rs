//! Training objectives with analytic gradients.
//!
//! All logarithms are natural. Probabilities are clamped at [`PROB_FLOOR`]
//! inside logs and variances at [`VAR_FLOOR`] before the Gaussian KL; a
//! clamped input receives zero gradient from the clamp itself.

use crate::error::{Error, Result};
use crate::nn::StatGrad;
use crate::tensor::Tensor;

pub const VAR_FLOOR: f64 = 1e-8;
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub im: Option<f64>,
    pub bnm: Option<f64>,
    pub ce: Option<f64>,
    pub lambda: f64,
}

/// Per-channel moments of a batch paired with the stored moments they are
/// matched against.
#[derive(Debug, Clone, Copy)]
pub struct StatPair<'a> {
    pub batch_mean: &'a Tensor,
    pub batch_var: &'a Tensor,
    pub stored_mean: &'a Tensor,
    pub stored_var: &'a Tensor,
}

impl StatPair<'_> {
    fn validate(&self) -> Result<usize> {
        let c = self.batch_mean.len();
        for t in [self.batch_var, self.stored_mean, self.stored_var] {
            if t.len() != c {
                return Err(Error::dim("bnm_loss", self.batch_mean.shape(), t.shape()));
            }
        }
        for ch in 0..c {
            let vals = [
                self.batch_mean.data()[ch],
                self.batch_var.data()[ch],
                self.stored_mean.data()[ch],
                self.stored_var.data()[ch],
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "bnm_loss: non-finite statistic in channel {ch}"
                )));
            }
            if !(vals[1].max(VAR_FLOOR) > 0.0 && vals[3].max(VAR_FLOOR) > 0.0) {
                return Err(Error::NonFinite(format!(
                    "bnm_loss: non-positive variance in channel {ch}"
                )));
            }
        }
        Ok(c)
    }
}

/// Mean over channels of `KL(N(stored) ‖ N(batch))`.
pub fn bnm_loss(stats: StatPair<'_>) -> Result<f64> {
    let c = stats.validate()?;
    let mut sum = 0.0;
    for ch in 0..c {
        let mu = stats.batch_mean.data()[ch];
        let var = stats.batch_var.data()[ch].max(VAR_FLOOR);
        let mu_s = stats.stored_mean.data()[ch];
        let var_s = stats.stored_var.data()[ch].max(VAR_FLOOR);
        sum += (var / var_s).ln() + (var_s + (mu_s - mu).powi(2)) / var - 1.0;
    }
    Ok(sum / (2.0 * c as f64))
}

/// Gradient of [`bnm_loss`] with respect to the batch mean and variance.
pub fn bnm_loss_grad(stats: StatPair<'_>) -> Result<StatGrad> {
    let c = stats.validate()?;
    let cf = c as f64;
    let mut d_mean = vec![0.0; c];
    let mut d_var = vec![0.0; c];
    for ch in 0..c {
        let mu = stats.batch_mean.data()[ch];
        let raw_var = stats.batch_var.data()[ch];
        let var = raw_var.max(VAR_FLOOR);
        let mu_s = stats.stored_mean.data()[ch];
        let var_s = stats.stored_var.data()[ch].max(VAR_FLOOR);
        d_mean[ch] = (mu - mu_s) / (cf * var);
        if raw_var > VAR_FLOOR {
            d_var[ch] = (1.0 / var - (var_s + (mu_s - mu).powi(2)) / (var * var)) / (2.0 * cf);
        }
    }
    Ok(StatGrad {
        d_mean: Tensor::vector(d_mean),
        d_var: Tensor::vector(d_var),
    })
}

fn check_probs(probs: &Tensor, op: &str) -> Result<(usize, usize)> {
    if probs.shape().len() != 2 {
        return Err(Error::Contract(format!("{op}: probabilities must be a B×K matrix")));
    }
    let (b, k) = (probs.rows(), probs.cols());
    for i in 0..b {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!(
                "{op}: row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok((b, k))
}

fn xlogx(p: f64) -> f64 {
    p * p.max(PROB_FLOOR).ln()
}

fn d_xlogx(p: f64) -> f64 {
    if p > PROB_FLOOR {
        p.ln() + 1.0
    } else {
        PROB_FLOOR.ln()
    }
}

/// Entropy in nats with the `0·log 0 = 0` convention.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

fn batch_mean_probs(probs: &Tensor) -> Vec<f64> {
    let (b, k) = (probs.rows(), probs.cols());
    let mut mean = vec![0.0; k];
    for i in 0..b {
        for (m, p) in mean.iter_mut().zip(probs.row(i)) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    mean
}

/// Information-maximization loss: `-H(mean prediction) + mean(H(prediction))`.
pub fn im_loss(probs: &Tensor) -> Result<f64> {
    let (b, _) = check_probs(probs, "im_loss")?;
    let mean = batch_mean_probs(probs);
    let cond: f64 = (0..b).map(|i| entropy(probs.row(i))).sum::<f64>() / b as f64;
    Ok(-entropy(&mean) + cond)
}

pub fn im_loss_grad(probs: &Tensor) -> Result<Tensor> {
    let (b, _) = check_probs(probs, "im_loss")?;
    let bf = b as f64;
    let mean = batch_mean_probs(probs);
    let mut g = Tensor::zeros(probs.shape());
    for i in 0..b {
        let row = probs.row(i).to_vec();
        for ((gv, &p), &m) in g.row_mut(i).iter_mut().zip(&row).zip(&mean) {
            *gv = (d_xlogx(m) - d_xlogx(p)) / bf;
        }
    }
    Ok(g)
}

fn smoothed_target(label: usize, k: usize, alpha: f64, class: usize) -> f64 {
    let base = alpha / k as f64;
    if class == label {
        1.0 - alpha + base
    } else {
        base
    }
}

fn check_labels(probs: &Tensor, labels: &[usize], alpha: f64) -> Result<(usize, usize)> {
    let (b, k) = check_probs(probs, "ce_smooth_loss")?;
    if labels.len() != b {
        return Err(Error::dim("ce_smooth_loss", &[b], &[labels.len()]));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Contract(format!(
            "ce_smooth_loss: label {l} at row {i} outside [0, {k})"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "ce_smooth_loss: smoothing {alpha} outside [0, 1)"
        )));
    }
    Ok((b, k))
}

/// Batch-mean cross-entropy against `(1 - α)·onehot + α/K`.
pub fn ce_smooth_loss(probs: &Tensor, labels: &[usize], alpha: f64) -> Result<f64> {
    let (b, k) = check_labels(probs, labels, alpha)?;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        for (c, &p) in probs.row(i).iter().enumerate() {
            total -= smoothed_target(label, k, alpha, c) * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(total / b as f64)
}

pub fn ce_smooth_loss_grad(probs: &Tensor, labels: &[usize], alpha: f64) -> Result<Tensor> {
    let (b, k) = check_labels(probs, labels, alpha)?;
    let mut g = Tensor::zeros(probs.shape());
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i).to_vec();
        for (c, (gv, &p)) in g.row_mut(i).iter_mut().zip(&row).enumerate() {
            if p > PROB_FLOOR {
                *gv = -smoothed_target(label, k, alpha, c) / (p * b as f64);
            }
        }
    }
    Ok(g)
}

/// `L_IM + λ·L_BNM`.
pub fn joint_loss(probs: &Tensor, stats: StatPair<'_>, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let im = im_loss(probs)?;
    let bnm = bnm_loss(stats)?;
    Ok(LossValue {
        total: im + lambda * bnm,
        im: Some(im),
        bnm: Some(bnm),
        ce: None,
        lambda,
    })
}

/// Gradients of [`joint_loss`]: with respect to the probabilities and to the
/// batch statistics.
pub fn joint_loss_grad(probs: &Tensor, stats: StatPair<'_>, lambda: f64) -> Result<(Tensor, StatGrad)> {
    let g_probs = im_loss_grad(probs)?;
    let mut sg = bnm_loss_grad(stats)?;
    sg.d_mean = sg.d_mean.map(|v| lambda * v);
    sg.d_var = sg.d_var.map(|v| lambda * v);
    Ok((g_probs, sg))
}
