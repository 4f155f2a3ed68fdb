//! Step-decayed learning rate, decaying first-moment coefficient, and the
//! ADAM update that uses both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub eta_start: f64,
    pub beta_start: f64,
    /// Learning-rate decay base `a`.
    pub decay_base: f64,
    /// Number of learning-rate decay steps `b` over the run.
    pub decay_steps: u64,
    /// Total optimizer iterations `T`.
    pub iterations: u64,
    pub batch_size: usize,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            eta_start: 0.001,
            beta_start: 0.9,
            decay_base: 0.5,
            decay_steps: 8,
            iterations: 600_000,
            batch_size: 64,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train schedule: {m}")));
        if !(self.eta_start > 0.0) {
            return bad("eta_start must be > 0");
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return bad("beta_start must lie in (0, 1)");
        }
        if !(self.decay_base > 0.0 && self.decay_base < 1.0) {
            return bad("decay_base must lie in (0, 1)");
        }
        if self.decay_steps == 0 || self.iterations == 0 {
            return bad("decay_steps and iterations must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for batch statistics");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) || !(self.adam_epsilon > 0.0) {
            return bad("adam_beta2 must lie in (0, 1) and adam_epsilon be > 0");
        }
        Ok(())
    }

    fn check_t(&self, t: u64) -> Result<()> {
        if t == 0 || t > self.iterations {
            return Err(Error::Domain(format!("iteration {t} outside [1, {}]", self.iterations)));
        }
        Ok(())
    }

    /// `eta_start * a^floor(b t / T)`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        self.check_t(t)?;
        // Integer floor avoids rounding at exact step boundaries.
        let k = (self.decay_steps as u128 * t as u128 / self.iterations as u128) as i32;
        Ok(self.eta_start * self.decay_base.powi(k))
    }

    /// Decaying-momentum coefficient at iteration `t`.
    pub fn beta1_at(&self, t: u64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta1_at_progress(t as f64 / self.iterations as f64))
    }

    /// The same schedule as a function of progress `t / T` in `[0, 1]`;
    /// progress 0 gives `beta_start`.
    pub fn beta1_at_progress(&self, progress: f64) -> f64 {
        let remaining = 1.0 - progress;
        let b = self.beta_start;
        b * remaining / ((1.0 - b) + b * remaining)
    }
}

pub fn lr_at(t: u64, schedule: &TrainSchedule) -> Result<f64> {
    schedule.lr_at(t)
}

pub fn beta1_at(t: u64, schedule: &TrainSchedule) -> Result<f64> {
    schedule.beta1_at(t)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    /// Product of the first-moment coefficients used so far; the exact bias
    /// correction when the coefficient varies per step.
    pub beta1_product: f64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Param]) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            beta1_product: 1.0,
        }
    }
}

/// One ADAM step at iteration `t` (1-based) using `lr_at(t)` and
/// `beta1_at(t)`. The step is rejected without touching any state when a
/// gradient entry is non-finite.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, t: u64, schedule: &TrainSchedule) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::dim("adam state", state.first.len(), params.len()));
    }
    let mut flat = 0;
    for p in params.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {} is {}", flat + i, p.grad.data()[i])));
        }
        flat += p.grad.len();
    }
    let eta = schedule.lr_at(t)?;
    let beta1 = schedule.beta1_at(t)?;
    let beta2 = schedule.adam_beta2;
    let eps = schedule.adam_epsilon;
    state.beta1_product *= beta1;
    let c1 = 1.0 - state.beta1_product;
    let c2 = 1.0 - beta2.powf(t as f64);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let g = p.grad.data();
        for (((w, mi), vi), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= eta * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_steps() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(1).unwrap(), 0.001);
        assert_eq!(s.lr_at(300_000).unwrap(), 6.25e-5);
        assert_eq!(s.lr_at(600_000).unwrap(), 3.90625e-6);
        assert!(s.lr_at(0).is_err());
        assert!(s.lr_at(600_001).is_err());
    }

    #[test]
    fn beta1_endpoints() {
        let s = TrainSchedule::default();
        assert_eq!(s.beta1_at_progress(0.0), 0.9);
        assert_eq!(s.beta1_at(600_000).unwrap(), 0.0);
        assert!((s.beta1_at(300_000).unwrap() - 0.45 / 0.55).abs() < 1e-15);
    }

    fn param(v: &[f64], g: &[f64]) -> Param {
        let mut p = Param::new(Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        p.grad = Tensor::new(vec![g.len()], g.to_vec()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let s = TrainSchedule::default();
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut st = AdamState::zeros_like(&[&p]);
        adam_step(&mut [&mut p], &mut st, 1, &s).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let s = TrainSchedule::default();
        let mut p = param(&[0.5, 0.5], &[1.0, 1.0]);
        let mut st = AdamState::zeros_like(&[&p]);
        adam_step(&mut [&mut p], &mut st, 1, &s).unwrap();
        let step = 0.5 - p.value.data()[0];
        assert!((step - 0.001).abs() < 1e-10, "{step}");
        assert_eq!(p.value.data()[0], p.value.data()[1]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let s = TrainSchedule::default();
        let mut a = param(&[0.0, 0.0], &[1.0, 1.0]);
        let mut b = param(&[0.0], &[f64::INFINITY]);
        let mut st = AdamState::zeros_like(&[&a, &b]);
        let before = st.clone();
        let err = adam_step(&mut [&mut a, &mut b], &mut st, 1, &s).unwrap_err();
        assert!(err.to_string().contains("parameter 2"), "{err}");
        assert_eq!(st, before);
        assert_eq!(a.value.data(), &[0.0, 0.0]);
    }
}
