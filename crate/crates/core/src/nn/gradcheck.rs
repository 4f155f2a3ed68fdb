//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Mode, Sequential};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn param_count(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, value: f64);
    fn loss(&mut self) -> Result<f64>;
    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)>;
}

/// Rounding error of a loss evaluation in units of `|L| eps`; losses that
/// sum many terms accumulate a few ulps.
pub const ROUNDING_ULPS: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding compare on an absolute scale. The bound used is
    /// raised to the rounding noise of the central difference at the loss
    /// value, `ROUNDING_ULPS |L| eps / (step * tolerance)`, when that is larger.
    pub floor: f64,
    pub max_params: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-6,
            max_params: 20_000,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Relative-error denominator floor actually applied.
    pub floor: f64,
    pub pass: bool,
}

impl GradientReport {
    pub fn worst(&self) -> Option<usize> {
        self.errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check(model: &mut dyn Differentiable, cfg: &GradCheckConfig) -> Result<GradientReport> {
    let n = model.param_count();
    if n > cfg.max_params {
        return Err(Error::Domain(format!(
            "gradient check over {n} parameters exceeds the cap of {}",
            cfg.max_params
        )));
    }
    let (loss, analytic) = model.loss_and_grad()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("gradient check: loss is {loss}")));
    }
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let orig = model.get(i);
        model.set(i, orig + cfg.step);
        let up = model.loss()?;
        model.set(i, orig - cfg.step);
        let down = model.loss()?;
        model.set(i, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("gradient check: perturbed loss at parameter {i}")));
        }
        numeric.push((up - down) / (2.0 * cfg.step));
    }
    let rounding = ROUNDING_ULPS * loss.abs().max(1.0) * f64::EPSILON / cfg.step;
    let floor = cfg.floor.max(rounding / cfg.tolerance);
    let errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &m)| relative_error(a, m, floor))
        .collect();
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradientReport {
        max_relative_error,
        pass: max_relative_error <= cfg.tolerance,
        floor,
        errors,
        analytic,
        numeric,
    })
}

/// Probes a network with the linear functional `sum(r * net(x))` for a fixed
/// seeded projection `r`. Parameters come first (in `Sequential::params`
/// order), followed by the input elements.
pub struct NetworkProbe<'a> {
    net: &'a mut Sequential,
    input: Tensor,
    projection: Option<Tensor>,
    mode: Mode,
    seed: u64,
    offsets: Vec<(usize, usize)>,
}

impl<'a> NetworkProbe<'a> {
    pub fn new(net: &'a mut Sequential, input: Tensor, mode: Mode, seed: u64) -> Self {
        let offsets = net
            .params()
            .iter()
            .scan(0, |acc, p| {
                let start = *acc;
                *acc += p.value.len();
                Some((start, p.value.len()))
            })
            .collect();
        Self {
            net,
            input,
            projection: None,
            mode,
            seed,
            offsets,
        }
    }

    /// `(start, len)` of each parameter tensor within the flat vector.
    pub fn param_ranges(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    fn param_total(&self) -> usize {
        self.offsets.last().map_or(0, |&(s, l)| s + l)
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&(s, _)| s <= i) - 1;
        (t, i - self.offsets[t].0)
    }

    fn run(&mut self) -> Result<(f64, Tensor)> {
        let out = self.net.forward(&self.input, self.mode)?;
        let seed = self.seed;
        let proj = self.projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(out.shape(), |_| StandardNormal.sample(&mut rng))
        });
        proj.expect_shape("probe projection", out.shape())?;
        let loss = out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
        Ok((loss, proj.clone()))
    }
}

impl Differentiable for NetworkProbe<'_> {
    fn param_count(&self) -> usize {
        self.param_total() + self.input.len()
    }

    fn get(&self, i: usize) -> f64 {
        let np = self.param_total();
        if i >= np {
            return self.input.data()[i - np];
        }
        let (t, k) = self.locate(i);
        self.net.params()[t].value.data()[k]
    }

    fn set(&mut self, i: usize, value: f64) {
        let np = self.param_total();
        if i >= np {
            self.input.data_mut()[i - np] = value;
            return;
        }
        let (t, k) = self.locate(i);
        self.net.params_mut()[t].value.data_mut()[k] = value;
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.run()?.0)
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)> {
        let (loss, proj) = self.run()?;
        let dx = self.net.backward(&proj)?;
        let mut grad: Vec<f64> = self
            .net
            .params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect();
        grad.extend_from_slice(dx.data());
        Ok((loss, grad))
    }
}

/// Checks parameter and input gradients of `net` at `input`.
pub fn gradient_check(
    net: &mut Sequential,
    input: &Tensor,
    mode: Mode,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradientReport> {
    let mut probe = NetworkProbe::new(net, input.clone(), mode, seed);
    check(&mut probe, cfg)
}
