//! Training objectives.
//!
//! * `traditional`: weighted reconstruction MSE plus the closed-form KL
//!   divergence to a standard normal, on unnormalized encodings.
//! * `normalized`: weighted reconstruction MSE plus `MSE(sigma, 1)` on
//!   encoding-normalized latents.
//! * `normalized+sobel`: as `normalized` with a weighted MSE between the
//!   Sobel derivatives of the reconstruction and the target.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::sobel::{sobel_batch, sobel_batch_adjoint};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeLossConfig {
    pub mode: String,
    pub lambda_mse: f64,
    pub lambda_sobel: f64,
    pub lambda_mu: f64,
    pub epsilon_bn: f64,
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        Self {
            mode: "normalized+sobel".into(),
            lambda_mse: 50.0,
            lambda_sobel: 50.0,
            lambda_mu: 2.5,
            epsilon_bn: 1e-8,
        }
    }
}

impl VaeLossConfig {
    pub fn with_mode(mode: &str) -> Self {
        Self {
            mode: mode.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        objective(&self.mode).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lambda_mse >= 0.0) || !(self.lambda_sobel >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lambda_mu > 0.0) || !(self.epsilon_bn > 0.0) {
            return Err(Error::Config("lambda_mu and epsilon_bn must be > 0".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<&'static dyn Objective> {
        objective(&self.mode)
    }
}

/// Loss addends as they enter the total (already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub sobel: f64,
    /// `MSE(sigma, 1)` for the normalized objectives, the KL term otherwise.
    pub sigma_reg: f64,
    /// Entries whose variance was clamped before the logarithm.
    pub clamped: usize,
}

/// Loss value with gradients for the reconstruction and the latent pair.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub d_generated: Tensor,
    pub d_mu: Tensor,
    pub d_sigma: Tensor,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether encodings pass through encoding normalization before sampling.
    fn normalizes_encoding(&self) -> bool;

    fn evaluate(
        &self,
        config: &VaeLossConfig,
        generated: &Tensor,
        target: &Tensor,
        mu: &Tensor,
        sigma: &Tensor,
    ) -> Result<Evaluation>;
}

fn check_shapes(generated: &Tensor, target: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<()> {
    target.expect_shape("loss target", generated.shape())?;
    sigma.expect_shape("loss sigma", mu.shape())?;
    if mu.ndim() != 2 || mu.rows() != generated.shape()[0] {
        return Err(Error::dim(
            "loss latents",
            format!("[{}, u]", generated.shape()[0]),
            format!("{:?}", mu.shape()),
        ));
    }
    Ok(())
}

/// `mean((a - b)^2)` and its gradient with respect to `a`.
fn mse_with_grad(a: &Tensor, b: &Tensor) -> (f64, Tensor) {
    let n = a.len() as f64;
    let diff = a.zip_map(b, |x, y| x - y).expect("shapes checked");
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    (value, diff.map(|d| 2.0 * d / n))
}

struct Traditional;

impl Objective for Traditional {
    fn name(&self) -> &'static str {
        "traditional"
    }

    fn normalizes_encoding(&self) -> bool {
        false
    }

    fn evaluate(&self, cfg: &VaeLossConfig, g: &Tensor, t: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Evaluation> {
        check_shapes(g, t, mu, sigma)?;
        let (mse, d_mse) = mse_with_grad(g, t);
        let scale = 1.0 / (2.0 * mu.len() as f64);
        let mut kl = 0.0;
        let mut clamped = 0;
        let mut d_mu = Tensor::zeros(mu.shape());
        let mut d_sigma = Tensor::zeros(sigma.shape());
        for (k, (&m, &s)) in mu.data().iter().zip(sigma.data()).enumerate() {
            let var = s * s;
            let (log_var, d_log) = if var < cfg.epsilon_bn {
                clamped += 1;
                (cfg.epsilon_bn.ln(), 0.0)
            } else {
                (var.ln(), 2.0 / s)
            };
            kl += m * m + var - log_var - 1.0;
            d_mu.data_mut()[k] = 2.0 * m * scale;
            d_sigma.data_mut()[k] = (2.0 * s - d_log) * scale;
        }
        if clamped > 0 {
            log::warn!("traditional loss: clamped {clamped} variances to {}", cfg.epsilon_bn);
        }
        let kl = kl * scale;
        let mse = cfg.lambda_mse * mse;
        Ok(Evaluation {
            terms: LossTerms {
                total: mse + kl,
                mse,
                sobel: 0.0,
                sigma_reg: kl,
                clamped,
            },
            d_generated: d_mse.map(|d| cfg.lambda_mse * d),
            d_mu,
            d_sigma,
        })
    }
}

struct Normalized {
    sobel: bool,
}

impl Objective for Normalized {
    fn name(&self) -> &'static str {
        if self.sobel {
            "normalized+sobel"
        } else {
            "normalized"
        }
    }

    fn normalizes_encoding(&self) -> bool {
        true
    }

    fn evaluate(&self, cfg: &VaeLossConfig, g: &Tensor, t: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Evaluation> {
        check_shapes(g, t, mu, sigma)?;
        let (mse, d_mse) = mse_with_grad(g, t);
        let mut d_generated = d_mse.map(|d| cfg.lambda_mse * d);
        let mut sobel = 0.0;
        if self.sobel {
            let (value, d_s) = mse_with_grad(&sobel_batch(g)?, &sobel_batch(t)?);
            sobel = cfg.lambda_sobel * value;
            let back = sobel_batch_adjoint(&d_s)?;
            for (d, b) in d_generated.data_mut().iter_mut().zip(back.data()) {
                *d += cfg.lambda_sobel * b;
            }
        }
        let ones = Tensor::full(sigma.shape(), 1.0);
        let (sigma_reg, d_sigma) = mse_with_grad(sigma, &ones);
        let mse = cfg.lambda_mse * mse;
        Ok(Evaluation {
            terms: LossTerms {
                total: mse + sobel + sigma_reg,
                mse,
                sobel,
                sigma_reg,
                clamped: 0,
            },
            d_generated,
            d_mu: Tensor::zeros(mu.shape()),
            d_sigma,
        })
    }
}

static TRADITIONAL: Traditional = Traditional;
static NORMALIZED: Normalized = Normalized { sobel: false };
static NORMALIZED_SOBEL: Normalized = Normalized { sobel: true };

static OBJECTIVES: LazyLock<Registry<&'static dyn Objective>> = LazyLock::new(|| {
    let mut r: Registry<&'static dyn Objective> = Registry::new("loss mode");
    r.register("traditional", &TRADITIONAL)
        .register("normalized", &NORMALIZED)
        .register("normalized+sobel", &NORMALIZED_SOBEL)
        .alias("full", "normalized+sobel")
        .alias("no-sobel", "normalized");
    r
});

pub fn objective(name: &str) -> Result<&'static dyn Objective> {
    OBJECTIVES.get(name)
}

pub fn objective_names() -> Vec<&'static str> {
    OBJECTIVES.names()
}

/// Reconstruction MSE plus KL divergence; `mu`, `sigma` are unnormalized.
pub fn loss_traditional(
    generated: &Tensor,
    input: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    lambda_mse: f64,
) -> Result<LossTerms> {
    let cfg = VaeLossConfig {
        mode: "traditional".into(),
        lambda_mse,
        ..VaeLossConfig::default()
    };
    Ok(TRADITIONAL.evaluate(&cfg, generated, input, mu, sigma)?.terms)
}

/// Reconstruction, Sobel and sigma terms; `config.mode` selects whether the
/// Sobel term is included.
pub fn loss_full(generated: &Tensor, input: &Tensor, sigma: &Tensor, config: &VaeLossConfig) -> Result<LossTerms> {
    let obj = config.objective()?;
    if !obj.normalizes_encoding() {
        return Err(Error::Config(format!(
            "loss_full needs a normalized mode, got '{}'",
            config.mode
        )));
    }
    let mu = Tensor::zeros(sigma.shape());
    Ok(obj.evaluate(config, generated, input, &mu, sigma)?.terms)
}
