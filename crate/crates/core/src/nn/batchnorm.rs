//! Channel-wise batch normalization with explicit forward/backward passes.

use crate::error::{Error, Result};
use crate::tensor::{channel_moments, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running averages.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics, record the input batch statistics,
    /// never touch the running buffers.
    Frozen,
    /// Normalize with batch statistics without updating the running buffers.
    Batch,
}

impl BnMode {
    fn uses_batch_stats(self) -> bool {
        matches!(self, BnMode::Train | BnMode::Batch)
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    mode: BnMode,
    input: Tensor,
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Gradient of a loss with respect to the stored batch statistics of a BN
/// layer's input.
#[derive(Debug, Clone)]
pub struct StatGrad {
    pub d_mean: Tensor,
    pub d_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BnState {
    pub channels: usize,
    pub width: usize,
    pub eps: f64,
    pub momentum: f64,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
    pub grad_scale: Tensor,
    pub grad_shift: Tensor,
    pub mode: BnMode,
    cache: Option<BnCache>,
}

impl BnState {
    pub fn new(channels: usize, width: usize) -> Self {
        Self::with_params(channels, width, DEFAULT_EPS, DEFAULT_MOMENTUM)
            .expect("default BN parameters are valid")
    }

    pub fn with_params(channels: usize, width: usize, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "batch norm needs channels >= 1 and width >= 1, got {channels}x{width}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batch norm eps must be > 0, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!(
                "batch norm momentum must lie in (0, 1), got {momentum}"
            )));
        }
        let c = [channels];
        Ok(BnState {
            channels,
            width,
            eps,
            momentum,
            batch_mean: Tensor::zeros(&c),
            batch_var: Tensor::zeros(&c),
            running_mean: Tensor::zeros(&c),
            running_var: Tensor::filled(&c, 1.0),
            scale: Tensor::filled(&c, 1.0),
            shift: Tensor::zeros(&c),
            grad_scale: Tensor::zeros(&c),
            grad_shift: Tensor::zeros(&c),
            mode: BnMode::Train,
            cache: None,
        })
    }

    pub fn features(&self) -> usize {
        self.channels * self.width
    }

    /// Forward pass in the layer's current mode.
    pub fn forward(&mut self, z: &Tensor) -> Result<Tensor> {
        self.forward_with_mode(z, self.mode)
    }

    pub fn forward_with_mode(&mut self, z: &Tensor, mode: BnMode) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.features() {
            return Err(Error::dim(
                "bn_forward",
                z.shape(),
                &[z.rows(), self.features()],
            ));
        }
        if mode != BnMode::Eval {
            let (mean, var) = channel_moments(z, self.channels, self.width)?;
            self.batch_mean = mean;
            self.batch_var = var;
        }

        let (mean, var) = if mode.uses_batch_stats() {
            (self.batch_mean.data(), self.batch_var.data())
        } else {
            (self.running_mean.data(), self.running_var.data())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut normalized = z.clone();
        let mut out = z.clone();
        let w = self.width;
        for i in 0..z.rows() {
            let nrow = normalized.row_mut(i);
            for (j, v) in nrow.iter_mut().enumerate() {
                let c = j / w;
                *v = (*v - mean[c]) * inv_std[c];
            }
            let orow = out.row_mut(i);
            for (j, v) in orow.iter_mut().enumerate() {
                let c = j / w;
                *v = self.scale.data()[c] * normalized.row(i)[j] + self.shift.data()[c];
            }
        }

        if mode == BnMode::Train {
            let rho = self.momentum;
            for c in 0..self.channels {
                let rm = &mut self.running_mean.data_mut()[c];
                *rm = rho * *rm + (1.0 - rho) * self.batch_mean.data()[c];
                let rv = &mut self.running_var.data_mut()[c];
                *rv = rho * *rv + (1.0 - rho) * self.batch_var.data()[c];
            }
        }

        self.cache = Some(BnCache {
            mode,
            input: z.clone(),
            normalized,
            inv_std,
        });
        Ok(out)
    }

    /// Backward pass matching the mode of the last forward call.
    ///
    /// `stat_grad`, when present, is the gradient of an extra loss term that
    /// reads the recorded input batch statistics; it is chained through
    /// `channel_moments` into the input gradient.
    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        stat_grad: Option<&StatGrad>,
        accumulate_params: bool,
    ) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("bn_backward called before bn_forward".into()))?;
        cache.input.same_shape(grad_out, "bn_backward")?;
        let (b, w) = (grad_out.rows(), self.width);
        let count = (b * w) as f64;

        let mut d_scale = vec![0.0; self.channels];
        let mut d_shift = vec![0.0; self.channels];
        for i in 0..b {
            for (j, (&g, &xh)) in grad_out.row(i).iter().zip(cache.normalized.row(i)).enumerate() {
                let c = j / w;
                d_scale[c] += g * xh;
                d_shift[c] += g;
            }
        }

        let mut grad_in = Tensor::zeros(grad_out.shape());
        if cache.mode.uses_batch_stats() {
            // d_shift[c] = Σ g and d_scale[c] = Σ g·x̂ give the two channel
            // means the normalization Jacobian needs.
            for i in 0..b {
                let gi = grad_in.row_mut(i);
                for (j, v) in gi.iter_mut().enumerate() {
                    let c = j / w;
                    let gamma = self.scale.data()[c];
                    let g = grad_out.row(i)[j] * gamma;
                    let xh = cache.normalized.row(i)[j];
                    let mean_g = gamma * d_shift[c] / count;
                    let mean_gx = gamma * d_scale[c] / count;
                    *v = cache.inv_std[c] * (g - mean_g - xh * mean_gx);
                }
            }
        } else {
            for i in 0..b {
                let gi = grad_in.row_mut(i);
                for (j, v) in gi.iter_mut().enumerate() {
                    let c = j / w;
                    *v = grad_out.row(i)[j] * self.scale.data()[c] * cache.inv_std[c];
                }
            }
        }

        if let Some(sg) = stat_grad {
            if sg.d_mean.len() != self.channels || sg.d_var.len() != self.channels {
                return Err(Error::dim(
                    "bn_backward stat gradient",
                    sg.d_mean.shape(),
                    &[self.channels],
                ));
            }
            for i in 0..b {
                let zi = cache.input.row(i);
                let gi = grad_in.row_mut(i);
                for (j, v) in gi.iter_mut().enumerate() {
                    let c = j / w;
                    let mu = self.batch_mean.data()[c];
                    *v += sg.d_mean.data()[c] / count
                        + sg.d_var.data()[c] * 2.0 * (zi[j] - mu) / count;
                }
            }
        }

        if accumulate_params {
            self.grad_scale = Tensor::vector(d_scale);
            self.grad_shift = Tensor::vector(d_shift);
        }
        Ok(grad_in)
    }

    pub fn zero_grad(&mut self) {
        self.grad_scale = Tensor::zeros(&[self.channels]);
        self.grad_shift = Tensor::zeros(&[self.channels]);
    }
}
