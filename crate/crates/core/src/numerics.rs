//! Gradients, finite-difference checks, Adam and the warmup-cosine schedule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("{0}")]
    Upstream(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;

/// Flat parameter vector; its layout is fixed by the owning architecture.
pub type ParamVector<S> = Vec<S>;

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait Differentiable<S: Scalar> {
    fn value(&self, params: &[S]) -> Result<S>;

    fn value_and_grad(&self, params: &[S]) -> Result<(S, ParamVector<S>)>;
}

/// Loss built from a pair of closures. Handy for tests and small problems.
pub struct FnLoss<F, G> {
    pub value: F,
    pub grad: G,
}

impl<S, F, G> Differentiable<S> for FnLoss<F, G>
where
    S: Scalar,
    F: Fn(&[S]) -> S,
    G: Fn(&[S]) -> Vec<S>,
{
    fn value(&self, params: &[S]) -> Result<S> {
        Ok((self.value)(params))
    }

    fn value_and_grad(&self, params: &[S]) -> Result<(S, ParamVector<S>)> {
        Ok(((self.value)(params), (self.grad)(params)))
    }
}

/// Analytic gradient, with the loss and gradient checked for finiteness.
pub fn grad_of<S: Scalar, L: Differentiable<S> + ?Sized>(loss: &L, params: &[S]) -> Result<ParamVector<S>> {
    let (value, grad) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(NumericError::NonFinite("loss value".into()));
    }
    if grad.len() != params.len() {
        return Err(NumericError::Shape(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NumericError::NonFinite(format!("gradient entry {i}")));
    }
    Ok(grad)
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Minimum number of coordinates probed by [`fd_check`].
pub const FD_MIN_COORDS: usize = 64;

/// Central differences on a seeded subset of at least [`FD_MIN_COORDS`]
/// coordinates (all of them when there are fewer). The relative error at a
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn fd_check<S: Scalar, L: Differentiable<S> + ?Sized>(
    loss: &L,
    params: &[S],
    h: f64,
    seed: u64,
) -> Result<FdReport> {
    fd_check_coords(loss, params, h, seed, FD_MIN_COORDS)
}

pub fn fd_check_coords<S: Scalar, L: Differentiable<S> + ?Sized>(
    loss: &L,
    params: &[S],
    h: f64,
    seed: u64,
    n_coords: usize,
) -> Result<FdReport> {
    let analytic = grad_of(loss, params)?;
    let mut coords: Vec<usize> = (0..params.len()).collect();
    if params.len() > n_coords {
        let mut rng = rng::stream(seed, "fd-check", 0);
        coords.shuffle(&mut rng);
        coords.truncate(n_coords);
        coords.sort_unstable();
    }
    let step: S = lit(h);
    let two_h: S = lit(2.0 * h);
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss.value(&probe)?;
        probe[i] = orig - step;
        let down = loss.value(&probe)?;
        probe[i] = orig;
        let numeric = ((up - down) / two_h).to_f64().unwrap();
        let a = analytic[i].to_f64().unwrap();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut OptimState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NumericError::Shape(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let (b1, b2): (S, S) = (lit(cfg.beta1), lit(cfg.beta2));
    let t = state.step as i32;
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps): (S, S) = (lit(lr), lit(cfg.eps));
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl Schedule {
    pub fn new(lr_max: f64, total_steps: usize, warmup_ratio: f64) -> Result<Self> {
        let s = Self {
            lr_max,
            total_steps,
            warmup_ratio,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(NumericError::Schedule("lr_max must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(NumericError::Schedule("total_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(NumericError::Schedule("warmup_ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `ceil(warmup_ratio * total_steps)`, kept below `total_steps`.
    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_ratio * self.total_steps as f64).ceil() as usize;
        w.min(self.total_steps - 1)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(NumericError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(self.lr_max * step as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
