//! Exact symmetric tSNE over latent distributions or plain features.

pub mod affinity;
pub mod kernel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use affinity::{
    calibrate_alpha, conditional_affinities, conditional_matrix, kl_divergence, perplexity_of, q_affinities,
    symmetrize, tsne_gradient, AffinityKind, AffinityMatrix, Calibration, QNormalization,
};
pub use kernel::{distance_matrix, feature_weights, kernel, kernel_names, weighted_sq_distance, DistanceKernel};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    /// Target perplexity; `None` uses `round(sqrt(N))`, at least 2.
    pub perplexity: Option<f64>,
    pub iterations: u64,
    pub dims: usize,
    pub epsilon_w: f64,
    /// Distance kernel name (`with-sigma` / `without-sigma` are aliases).
    pub kernel: String,
    pub q_normalization: QNormalization,
    pub exaggeration: f64,
    pub exaggeration_iterations: u64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: u64,
    pub learning_rate: f64,
    pub min_gain: f64,
    pub init_std: f64,
    pub perplexity_tolerance: f64,
    pub calibration_iterations: usize,
    pub trace_interval: u64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: None,
            iterations: 10_000,
            dims: 2,
            epsilon_w: 0.01,
            kernel: "uncertainty-weighted".into(),
            q_normalization: QNormalization::PerRow,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            learning_rate: 200.0,
            min_gain: 0.01,
            init_std: 1e-4,
            perplexity_tolerance: 1e-10,
            calibration_iterations: 200,
            trace_interval: 50,
            seed: 0,
        }
    }
}

pub fn default_perplexity(n: usize) -> f64 {
    (n as f64).sqrt().round().max(2.0)
}

impl TsneConfig {
    pub fn perplexity_for(&self, n: usize) -> f64 {
        self.perplexity.unwrap_or_else(|| default_perplexity(n))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("tsne: {m}")));
        kernel(&self.kernel).map_err(|e| Error::Config(e.to_string()))?;
        let perp = self.perplexity_for(n);
        if n >= 2 && !(perp > 1.0 && perp <= (n - 1) as f64) {
            return bad(format!("perplexity {perp} must lie in (1, N - 1 = {}]", n - 1));
        }
        if self.iterations == 0 || self.dims == 0 {
            return bad("iterations and dims must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.init_std > 0.0) || !(self.epsilon_w > 0.0) {
            return bad("learning_rate, init_std and epsilon_w must be > 0".into());
        }
        if !(self.perplexity_tolerance > 0.0) || self.trace_interval == 0 {
            return bad("perplexity_tolerance and trace_interval must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub y: Tensor,
    /// `(iteration, KL)`; iteration 0 is the initial layout.
    pub kl_trace: Vec<(u64, f64)>,
    pub alphas: Vec<f64>,
    /// Achieved perplexity of each input row.
    pub perplexities: Vec<f64>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.y.row_len()
    }
}

/// Calibrated joint input similarities and per-row calibrations.
pub fn joint_affinities(
    mu: &Tensor,
    sigma: Option<&Tensor>,
    config: &TsneConfig,
) -> Result<(AffinityMatrix, Vec<Calibration>)> {
    let n = mu.rows();
    if n < MIN_POINTS {
        return Err(Error::TooFewPoints(n));
    }
    config.validate(n)?;
    mu.ensure_finite("tsne input means")?;
    if let Some(s) = sigma {
        s.ensure_finite("tsne input sigmas")?;
    }
    let k = kernel(&config.kernel)?;
    let d = distance_matrix(k, mu, sigma, config.epsilon_w)?;
    let (cond, cals) = conditional_matrix(
        &d,
        config.perplexity_for(n),
        config.perplexity_tolerance,
        config.calibration_iterations,
    )?;
    Ok((symmetrize(&cond)?, cals))
}

/// Embeds `mu` (`[N, u]`), optionally with per-feature standard deviations.
pub fn run_tsne(mu: &Tensor, sigma: Option<&Tensor>, config: &TsneConfig) -> Result<Embedding> {
    let (p, cals) = joint_affinities(mu, sigma, config)?;
    let n = p.len();
    let v = config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut y = Tensor::from_fn(&[n, v], |_| init.sample(&mut rng));
    let mut update = vec![0.0; n * v];
    let mut gains = vec![1.0f64; n * v];
    let kl = |y: &Tensor| -> Result<f64> { kl_divergence(&p, &q_affinities(y, config.q_normalization)?) };
    let mut trace = vec![(0, kl(&y)?)];
    let exaggerated = p.p.map(|x| x * config.exaggeration);

    for t in 1..=config.iterations {
        let p_now = if t <= config.exaggeration_iterations {
            exaggerated.data()
        } else {
            p.p.data()
        };
        let grad = affinity::gradient_inner(p_now, &y, config.q_normalization, &affinity::student_t(&y));
        if !grad.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                reason: format!("non-finite tSNE gradient; KL trace {trace:?}"),
            });
        }
        let momentum = if t <= config.momentum_switch {
            config.momentum_initial
        } else {
            config.momentum_final
        };
        for ((yk, (uk, gk)), &g) in y
            .data_mut()
            .iter_mut()
            .zip(update.iter_mut().zip(gains.iter_mut()))
            .zip(grad.data())
        {
            *gk = if (g > 0.0) != (*uk > 0.0) { *gk + 0.2 } else { *gk * 0.8 };
            *gk = gk.max(config.min_gain);
            *uk = momentum * *uk - config.learning_rate * *gk * g;
            *yk += *uk;
        }
        recenter(&mut y);
        if t % config.trace_interval == 0 || t == config.iterations {
            trace.push((t, kl(&y)?));
        }
    }
    Ok(Embedding {
        y,
        kl_trace: trace,
        alphas: cals.iter().map(|c| c.alpha).collect(),
        perplexities: cals.iter().map(|c| c.perplexity).collect(),
    })
}

fn recenter(y: &mut Tensor) {
    let (n, v) = (y.rows(), y.row_len());
    let mut mean = vec![0.0; v];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(y.row(i)) {
            *m += x;
        }
    }
    for i in 0..n {
        for (x, m) in y.row_mut(i).iter_mut().zip(&mean) {
            *x -= m / n as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_default_rounds() {
        assert_eq!(default_perplexity(300), 17.0);
        assert_eq!(default_perplexity(2), 2.0);
        assert_eq!(default_perplexity(500), 22.0);
    }

    #[test]
    fn four_points_rejected() {
        let mu = Tensor::from_fn(&[4, 2], |i| i as f64);
        let err = run_tsne(&mu, None, &TsneConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewPoints(4)));
    }

    #[test]
    fn sigma_required_for_weighted_kernel() {
        let mu = Tensor::from_fn(&[6, 2], |i| i as f64);
        let err = run_tsne(&mu, None, &TsneConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn short_run_traces_and_stays_finite() {
        let mu = Tensor::from_fn(&[12, 3], |i| ((i * 7919) % 31) as f64 / 7.0);
        let cfg = TsneConfig {
            kernel: "euclidean".into(),
            iterations: 120,
            perplexity: Some(4.0),
            ..TsneConfig::default()
        };
        let e = run_tsne(&mu, None, &cfg).unwrap();
        let its: Vec<u64> = e.kl_trace.iter().map(|t| t.0).collect();
        assert_eq!(its, vec![0, 50, 100, 120]);
        assert!(e.y.is_finite());
        assert!(e.kl_trace.iter().all(|t| t.1 >= -1e-12));
        assert_eq!(e.alphas.len(), 12);
    }
}
