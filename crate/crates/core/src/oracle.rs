//! Independent numerical references: Monte-Carlo KL, quadrature total
//! variation, Pinsker-bound checks and central finite differences.
//!
//! Total variation uses the sup-over-events convention, `d₁ ∈ [0, 1]`.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::losses::{bnm_loss, StatPair};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1D {
    mean: f64,
    var: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
            return Err(Error::Parameter(format!(
                "Gaussian needs finite mean and variance > 0, got N({mean}, {var})"
            )));
        }
        Ok(Gaussian1D { mean, var })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        -0.5 * (std::f64::consts::TAU * self.var).ln() - (x - self.mean).powi(2) / (2.0 * self.var)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    /// `KL(self ‖ q)` through the same closed form the matching loss uses.
    pub fn kl_closed_form(&self, q: &Gaussian1D) -> f64 {
        let (sm, sv) = (Tensor::vector(vec![self.mean]), Tensor::vector(vec![self.var]));
        let (qm, qv) = (Tensor::vector(vec![q.mean]), Tensor::vector(vec![q.var]));
        bnm_loss(StatPair {
            batch_mean: &qm,
            batch_var: &qv,
            stored_mean: &sm,
            stored_var: &sv,
        })
        .expect("validated Gaussians give a finite KL")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn within_sigmas(&self, target: f64, sigmas: f64) -> bool {
        (self.estimate - target).abs() <= sigmas * self.stderr + 1e-15
    }
}

pub const MIN_MC_SAMPLES: usize = 10_000;

/// A random member of the sweep family `μ ∈ [−3, 3]`, `σ² ∈ [0.1, 9]`.
pub fn random_gaussian(rng: &mut RngState) -> Gaussian1D {
    let mean = rng.uniform_range(-3.0, 3.0);
    let var = rng.uniform_range(0.1, 9.0);
    Gaussian1D { mean, var }
}

/// `E_p[log p(x) − log q(x)]` estimated from `n` draws of `p`.
pub fn kl_monte_carlo(p: &Gaussian1D, q: &Gaussian1D, n: usize, rng: &mut RngState) -> Result<McEstimate> {
    if n < MIN_MC_SAMPLES {
        return Err(Error::Parameter(format!(
            "kl_monte_carlo needs at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let x = p.mean + p.std() * rng.standard_normal();
        let r = p.log_pdf(x) - q.log_pdf(x);
        sum += r;
        sum_sq += r * r;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / nf).sqrt(),
    })
}

/// Points where the two densities cross (roots of `log p = log q`).
fn crossings(p: &Gaussian1D, q: &Gaussian1D) -> Vec<f64> {
    // a x² + b x + c = 0 from equating the log densities
    let a = 1.0 / (2.0 * q.var) - 1.0 / (2.0 * p.var);
    let b = p.mean / p.var - q.mean / q.var;
    let c = q.mean * q.mean / (2.0 * q.var) - p.mean * p.mean / (2.0 * p.var)
        + 0.5 * (q.var / p.var).ln();
    if a.abs() < 1e-14 * (1.0 / p.var + 1.0 / q.var) {
        if b.abs() < 1e-300 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    let mut r = vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)];
    r.sort_by(|x, y| x.partial_cmp(y).unwrap());
    r
}

struct Simpson<'a> {
    f: &'a dyn Fn(f64) -> f64,
    max_depth: u32,
    converged: bool,
}

impl Simpson<'_> {
    fn whole(&self, a: f64, b: f64) -> (f64, f64, f64) {
        let (fa, fm, fb) = ((self.f)(a), (self.f)(0.5 * (a + b)), (self.f)(b));
        (fa, fm, fb)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(&mut self, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = ((self.f)(lm), (self.f)(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        if depth >= self.max_depth {
            self.converged = false;
            return left + right + delta / 15.0;
        }
        self.recurse(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
            + self.recurse(m, b, fm, frm, fb, right, tol / 2.0, depth + 1)
    }

    fn integrate(&mut self, a: f64, b: f64, tol: f64) -> f64 {
        let (fa, fm, fb) = self.whole(a, b);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        self.recurse(a, b, fa, fm, fb, whole, tol, 0)
    }
}

pub const TV_TOLERANCE: f64 = 1e-6;

/// `½∫|p − q|` by adaptive Simpson over ±10 pooled standard deviations,
/// split at the density crossings so each piece is smooth.
pub fn tv_distance_quadrature(p: &Gaussian1D, q: &Gaussian1D) -> Result<f64> {
    let pooled = (0.5 * (p.var + q.var)).sqrt();
    let lo = p.mean.min(q.mean) - 10.0 * pooled;
    let hi = p.mean.max(q.mean) + 10.0 * pooled;
    let mut knots = vec![lo];
    knots.extend(crossings(p, q).into_iter().filter(|&x| x > lo && x < hi));
    knots.push(hi);
    // further split each piece so narrow peaks are never stepped over
    let pieces = 32;
    let mut grid = Vec::new();
    for w in knots.windows(2) {
        for k in 0..pieces {
            grid.push(w[0] + (w[1] - w[0]) * k as f64 / pieces as f64);
        }
    }
    grid.push(hi);

    let f = |x: f64| 0.5 * (p.pdf(x) - q.pdf(x)).abs();
    let mut simpson = Simpson {
        f: &f,
        max_depth: 40,
        converged: true,
    };
    let tol = TV_TOLERANCE / (grid.len() - 1) as f64;
    let total: f64 = grid
        .windows(2)
        .map(|w| simpson.integrate(w[0], w[1], tol))
        .sum();
    if !simpson.converged || !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "total-variation quadrature did not converge for N({}, {}) vs N({}, {})",
            p.mean, p.var, q.mean, q.var
        )));
    }
    Ok(total.clamp(0.0, 1.0))
}

/// `2Φ(δ/2) − 1`: total variation between `N(0, 1)` and `N(δ, 1)`.
pub fn tv_mean_shift_closed_form(delta: f64) -> f64 {
    let phi = Normal::standard();
    2.0 * phi.cdf(delta.abs() / 2.0) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerReport {
    pub tv: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `d₁(p, q) ≤ √(KL(p ‖ q) / 2)`.
pub fn check_pinsker(p: &Gaussian1D, q: &Gaussian1D) -> Result<PinskerReport> {
    let tv = tv_distance_quadrature(p, q)?;
    let kl = p.kl_closed_form(q);
    let bound = (kl / 2.0).sqrt();
    Ok(PinskerReport {
        tv,
        kl,
        bound,
        holds: tv <= bound + 1e-9,
    })
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite near coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `max|analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

/// Compares an analytic gradient with central differences; returns the
/// relative error of [`relative_error`].
pub fn grad_check(f: &dyn Fn(&[f64]) -> f64, analytic: &[f64], point: &[f64], step: f64) -> Result<f64> {
    if analytic.len() != point.len() {
        return Err(Error::dim("grad_check", &[analytic.len()], &[point.len()]));
    }
    if !f(point).is_finite() {
        return Err(Error::NonFinite("objective is non-finite at the check point".into()));
    }
    let numeric = numeric_gradient(f, point, step)?;
    Ok(relative_error(analytic, &numeric))
}
