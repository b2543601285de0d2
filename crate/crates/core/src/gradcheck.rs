//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each check draws random non-degenerate instances (variances above 0.1,
//! probabilities above 0.01), compares the backward pass against
//! [`oracle::grad_check`] and reports the worst relative error.

use crate::adaptation::{adaptation_gradients, split_and_freeze, StoredStats};
use crate::error::Result;
use crate::losses::{bnm_loss, bnm_loss_grad, ce_smooth_loss, ce_smooth_loss_grad, im_loss, im_loss_grad, StatPair};
use crate::nn::{softmax_rows, BnState, ClassifierBn, DenseLayer, Model, SoftmaxLayer, TanhLayer, Topology};
use crate::oracle::grad_check;
use crate::rng::RngState;
use crate::tensor::{channel_moments, Tensor};

pub const LAYER_STEP: f64 = 1e-3;
pub const BNM_STEP: f64 = 1e-5;
/// Smallest per-channel batch variance of a non-degenerate instance.
pub const MIN_BATCH_VAR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn random_vec(rng: &mut RngState, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.uniform_range(lo, hi)).collect())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn run(
    name: &'static str,
    instances: usize,
    tolerance: f64,
    mut one: impl FnMut() -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        max_error = max_error.max(one()?);
    }
    Ok(GradCheckReport {
        name,
        instances,
        max_error,
        tolerance,
    })
}

/// Dense layer: input, weights and bias under a random linear readout.
pub fn check_dense(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("dense", instances, 1e-4, || {
        let (b, i, o) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let layer = DenseLayer::from_parameters(random_matrix(rng, i, o, 1.0), random_vec(rng, o, -1.0, 1.0))?;
        let x = random_matrix(rng, b, i, 1.0);
        let readout = random_matrix(rng, b, o, 1.0);
        let point: Vec<f64> = x
            .data()
            .iter()
            .chain(layer.weights.data())
            .chain(layer.bias.data())
            .copied()
            .collect();
        let f = |p: &[f64]| {
            let x = Tensor::matrix(b, i, p[..b * i].to_vec()).unwrap();
            let w = Tensor::matrix(i, o, p[b * i..b * i + i * o].to_vec()).unwrap();
            let bias = Tensor::vector(p[b * i + i * o..].to_vec());
            let mut l = DenseLayer::from_parameters(w, bias).unwrap();
            dot(&l.forward(&x).unwrap(), &readout)
        };
        let mut l = layer.clone();
        l.forward(&x)?;
        let gx = l.backward(&readout, true)?;
        let analytic: Vec<f64> = gx
            .data()
            .iter()
            .chain(l.grad_weights.data())
            .chain(l.grad_bias.data())
            .copied()
            .collect();
        grad_check(&f, &analytic, &point, LAYER_STEP)
    })
}

pub fn check_tanh(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("tanh", instances, 1e-4, || {
        let (b, d) = (1 + rng.below(8), 1 + rng.below(8));
        let x = random_matrix(rng, b, d, 1.5);
        let readout = random_matrix(rng, b, d, 1.0);
        let f = |p: &[f64]| {
            let x = Tensor::matrix(b, d, p.to_vec()).unwrap();
            dot(&TanhLayer::default().forward(&x), &readout)
        };
        let mut t = TanhLayer::default();
        t.forward(&x);
        let g = t.backward(&readout)?;
        grad_check(&f, g.data(), x.data(), LAYER_STEP)
    })
}

fn random_logits(rng: &mut RngState, b: usize, k: usize) -> Tensor {
    loop {
        let logits = random_matrix(rng, b, k, 1.0);
        if softmax_rows(&logits).data().iter().all(|&p| p > 0.01) {
            return logits;
        }
    }
}

/// Softmax followed by label-smoothed cross-entropy, gradient w.r.t. logits.
pub fn check_softmax_ce(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("softmax+ce", instances, 1e-4, || {
        let (b, k) = (1 + rng.below(8), 2 + rng.below(5));
        let logits = random_logits(rng, b, k);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let alpha = rng.uniform_range(0.0, 0.3);
        let f = |p: &[f64]| {
            let z = Tensor::matrix(b, k, p.to_vec()).unwrap();
            ce_smooth_loss(&softmax_rows(&z), &labels, alpha).unwrap()
        };
        let mut s = SoftmaxLayer::default();
        let probs = s.forward(&logits);
        let g = s.backward(&ce_smooth_loss_grad(&probs, &labels, alpha)?)?;
        grad_check(&f, g.data(), logits.data(), LAYER_STEP)
    })
}

/// Softmax followed by the information-maximization loss.
pub fn check_softmax_im(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("softmax+im", instances, 1e-4, || {
        let (b, k) = (2 + rng.below(7), 2 + rng.below(5));
        let logits = random_logits(rng, b, k);
        let f = |p: &[f64]| {
            let z = Tensor::matrix(b, k, p.to_vec()).unwrap();
            im_loss(&softmax_rows(&z)).unwrap()
        };
        let mut s = SoftmaxLayer::default();
        let probs = s.forward(&logits);
        let g = s.backward(&im_loss_grad(&probs)?)?;
        grad_check(&f, g.data(), logits.data(), LAYER_STEP)
    })
}

fn random_bn_input(rng: &mut RngState, b: usize, channels: usize, width: usize) -> Tensor {
    loop {
        let z = random_matrix(rng, b, channels * width, 1.5);
        let (_, var) = channel_moments(&z, channels, width).expect("valid layout");
        if var.data().iter().all(|&v| v > 0.1) {
            return z;
        }
    }
}

/// Train-mode BN: input, scale and shift, on 4×6 batches.
pub fn check_bn_train(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("batchnorm(train)", instances, 1e-4, || {
        let (channels, width) = if rng.below(2) == 0 { (3, 2) } else { (6, 1) };
        let b = 4;
        let z = random_bn_input(rng, b, channels, width);
        let scale = random_vec(rng, channels, 0.5, 2.0);
        let shift = random_vec(rng, channels, -1.0, 1.0);
        let readout = random_matrix(rng, b, channels * width, 1.0);
        let n = z.len();
        let make = |scale: Tensor, shift: Tensor| {
            let mut bn = BnState::new(channels, width);
            bn.scale = scale;
            bn.shift = shift;
            bn
        };
        let f = |p: &[f64]| {
            let z = Tensor::matrix(b, channels * width, p[..n].to_vec()).unwrap();
            let mut bn = make(
                Tensor::vector(p[n..n + channels].to_vec()),
                Tensor::vector(p[n + channels..].to_vec()),
            );
            dot(&bn.forward(&z).unwrap(), &readout)
        };
        let mut bn = make(scale.clone(), shift.clone());
        bn.forward(&z)?;
        let gz = bn.backward(&readout, None, true)?;
        let point: Vec<f64> = z.data().iter().chain(scale.data()).chain(shift.data()).copied().collect();
        let analytic: Vec<f64> = gz
            .data()
            .iter()
            .chain(bn.grad_scale.data())
            .chain(bn.grad_shift.data())
            .copied()
            .collect();
        grad_check(&f, &analytic, &point, LAYER_STEP)
    })
}

/// Closed-form matching-loss gradient w.r.t. batch mean and variance.
pub fn check_bnm(rng: &mut RngState, instances: usize) -> Result<GradCheckReport> {
    run("bnm_loss", instances, 1e-6, || {
        let c = 1 + rng.below(6);
        let mean = random_vec(rng, c, -2.0, 2.0);
        let var = random_vec(rng, c, 0.1, 4.0);
        let stored_mean = random_vec(rng, c, -2.0, 2.0);
        let stored_var = random_vec(rng, c, 0.1, 4.0);
        let f = |p: &[f64]| {
            let (m, v) = (Tensor::vector(p[..c].to_vec()), Tensor::vector(p[c..].to_vec()));
            bnm_loss(StatPair {
                batch_mean: &m,
                batch_var: &v,
                stored_mean: &stored_mean,
                stored_var: &stored_var,
            })
            .unwrap()
        };
        let g = bnm_loss_grad(StatPair {
            batch_mean: &mean,
            batch_var: &var,
            stored_mean: &stored_mean,
            stored_var: &stored_var,
        })?;
        let point: Vec<f64> = mean.data().iter().chain(var.data()).copied().collect();
        let analytic: Vec<f64> = g.d_mean.data().iter().chain(g.d_var.data()).copied().collect();
        grad_check(&f, &analytic, &point, BNM_STEP)
    })
}

fn flat_params(model: &mut Model) -> Vec<f64> {
    model
        .trainable_params()
        .iter()
        .flat_map(|(p, _)| p.data().to_vec())
        .collect()
}

fn flat_grads(model: &mut Model) -> Vec<f64> {
    model
        .trainable_params()
        .iter()
        .flat_map(|(_, g)| g.data().to_vec())
        .collect()
}

fn set_flat(model: &mut Model, values: &[f64]) {
    let mut off = 0;
    for (p, _) in model.trainable_params() {
        let n = p.len();
        p.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
}

/// `L_IM + λ·L_BNM` through a split model with a two-layer encoder, w.r.t.
/// every encoder parameter. `classifier_bn` selects how the classifier BN
/// normalizes.
pub fn check_end_to_end(rng: &mut RngState, instances: usize, classifier_bn: ClassifierBn) -> Result<GradCheckReport> {
    let name = match classifier_bn {
        ClassifierBn::Frozen => "joint_loss(end-to-end)",
        ClassifierBn::Batch => "joint_loss(end-to-end, batch-stat classifier)",
    };
    run(name, instances, 1e-4, || loop {
        let topo = Topology {
            input_dim: 2,
            hidden: vec![4],
            feature_dim: 3,
            classes: 3,
            encoder_bn: true,
        };
        let mut model = Model::from_topology(&topo, rng.below(1 << 20) as u64)?;
        // pretend-pretrained classifier statistics
        if let crate::nn::Layer::BatchNorm(bn) = &mut model.layers[model.split_index] {
            bn.running_mean = random_vec(rng, 3, -0.5, 0.5);
            bn.running_var = random_vec(rng, 3, 0.3, 2.0);
            bn.scale = random_vec(rng, 3, 0.5, 1.5);
            bn.shift = random_vec(rng, 3, -0.3, 0.3);
        }
        let split = model.split_index;
        let stored: StoredStats = split_and_freeze(&mut model, split, classifier_bn)?;
        let x = random_matrix(rng, 8, 2, 1.0);
        let lambda = rng.uniform_range(0.5, 10.0);

        let base = model.clone();
        let f = |p: &[f64]| {
            let mut m = base.clone();
            set_flat(&mut m, p);
            adaptation_gradients(&mut m, &x, &stored, lambda).unwrap().total
        };
        let point = flat_params(&mut model);
        adaptation_gradients(&mut model, &x, &stored, lambda)?;
        // A nearly constant channel makes the normalization so curved that the
        // central difference at this step is no longer a reference.
        let degenerate = model
            .layers
            .iter()
            .filter_map(|l| l.as_bn())
            .any(|bn| bn.batch_var.data().iter().any(|&v| v < MIN_BATCH_VAR));
        if degenerate {
            continue;
        }
        let analytic = flat_grads(&mut model);
        break grad_check(&f, &analytic, &point, LAYER_STEP);
    })
}

/// Every check above, `instances` random draws each.
pub fn all_checks(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngState::with_stream(seed, 0x6763);
    Ok(vec![
        check_dense(&mut rng, instances)?,
        check_tanh(&mut rng, instances)?,
        check_softmax_ce(&mut rng, instances)?,
        check_softmax_im(&mut rng, instances)?,
        check_bn_train(&mut rng, instances)?,
        check_bnm(&mut rng, instances)?,
        check_end_to_end(&mut rng, instances, ClassifierBn::Frozen)?,
        check_end_to_end(&mut rng, instances, ClassifierBn::Batch)?,
    ])
}
