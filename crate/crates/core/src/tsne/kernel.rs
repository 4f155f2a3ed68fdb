//! Squared-distance kernels between latent points.

use std::sync::LazyLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::Tensor;

pub trait DistanceKernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the kernel reads per-feature standard deviations.
    fn needs_sigma(&self) -> bool;

    fn sq_distance(&self, mu_i: &[f64], mu_j: &[f64], sigma_i: &[f64], sigma_j: &[f64], epsilon_w: f64) -> f64;
}

/// Plain squared Euclidean distance between means.
pub struct Euclidean;

impl DistanceKernel for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn needs_sigma(&self) -> bool {
        false
    }

    fn sq_distance(&self, a: &[f64], b: &[f64], _: &[f64], _: &[f64], _: f64) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}

/// Squared differences weighted by inverse combined variance, with weights
/// normalized to sum to one over features.
pub struct UncertaintyWeighted;

impl DistanceKernel for UncertaintyWeighted {
    fn name(&self) -> &'static str {
        "uncertainty-weighted"
    }

    fn needs_sigma(&self) -> bool {
        true
    }

    fn sq_distance(&self, mu_i: &[f64], mu_j: &[f64], sigma_i: &[f64], sigma_j: &[f64], epsilon_w: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..mu_i.len() {
            let inv = 1.0 / (sigma_i[k] * sigma_i[k] + sigma_j[k] * sigma_j[k] + epsilon_w);
            let d = mu_i[k] - mu_j[k];
            num += inv * d * d;
            den += inv;
        }
        num / den
    }
}

static EUCLIDEAN: Euclidean = Euclidean;
static WEIGHTED: UncertaintyWeighted = UncertaintyWeighted;

static KERNELS: LazyLock<Registry<&'static dyn DistanceKernel>> = LazyLock::new(|| {
    let mut r: Registry<&'static dyn DistanceKernel> = Registry::new("distance kernel");
    r.register("euclidean", &EUCLIDEAN)
        .register("uncertainty-weighted", &WEIGHTED)
        .alias("without-sigma", "euclidean")
        .alias("with-sigma", "uncertainty-weighted");
    r
});

pub fn kernel(name: &str) -> Result<&'static dyn DistanceKernel> {
    KERNELS.get(name)
}

pub fn kernel_names() -> Vec<&'static str> {
    KERNELS.names()
}

/// Per-feature weights `w_ijk` of the uncertainty-weighted kernel.
pub fn feature_weights(sigma_i: &[f64], sigma_j: &[f64], epsilon_w: f64) -> Result<Vec<f64>> {
    if sigma_i.len() != sigma_j.len() {
        return Err(Error::dim("feature weights", sigma_i.len(), sigma_j.len()));
    }
    let inv: Vec<f64> = sigma_i
        .iter()
        .zip(sigma_j)
        .map(|(a, b)| 1.0 / (a * a + b * b + epsilon_w))
        .collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// `sum_k w_ijk (mu_ik - mu_jk)^2`.
pub fn weighted_sq_distance(mu_i: &[f64], mu_j: &[f64], sigma_i: &[f64], sigma_j: &[f64], epsilon_w: f64) -> Result<f64> {
    let u = mu_i.len();
    if mu_j.len() != u || sigma_i.len() != u || sigma_j.len() != u {
        return Err(Error::dim(
            "weighted distance",
            format!("vectors of length {u}"),
            format!("{}, {}, {}", mu_j.len(), sigma_i.len(), sigma_j.len()),
        ));
    }
    Ok(WEIGHTED.sq_distance(mu_i, mu_j, sigma_i, sigma_j, epsilon_w))
}

/// Full `N x N` squared-distance matrix with a zero diagonal.
pub fn distance_matrix(
    kernel: &dyn DistanceKernel,
    mu: &Tensor,
    sigma: Option<&Tensor>,
    epsilon_w: f64,
) -> Result<Tensor> {
    if mu.ndim() != 2 {
        return Err(Error::dim("distance matrix input", "[N, u]", format!("{:?}", mu.shape())));
    }
    let n = mu.rows();
    let sigma = match (kernel.needs_sigma(), sigma) {
        (true, None) => {
            return Err(Error::Config(format!("kernel '{}' needs sigma values", kernel.name())));
        }
        (true, Some(s)) => {
            s.expect_shape("distance matrix sigma", mu.shape())?;
            s.clone()
        }
        // Never read; keeps one code path.
        (false, _) => mu.clone(),
    };
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, d) in row.iter_mut().enumerate() {
            if i != j {
                *d = kernel.sq_distance(mu.row(i), mu.row(j), sigma.row(i), sigma.row(j), epsilon_w);
            }
        }
    });
    Tensor::new(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_sigmas_give_scaled_euclidean() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 0.0, 1.0];
        let s = [0.7; 3];
        let d = weighted_sq_distance(&a, &b, &s, &s, 0.01).unwrap();
        assert!((d - 9.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn hand_evaluated_weights() {
        // sigma_i^2 + sigma_j^2 + eps = (1, 4).
        let si = [(0.5f64 - 0.005).sqrt(), (2.0f64 - 0.005).sqrt()];
        let w = feature_weights(&si, &si, 0.01).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12, "{w:?}");
        let d = weighted_sq_distance(&[1.0, 1.0], &[0.0, 0.0], &si, &si, 0.01).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_means_are_at_zero() {
        let d = weighted_sq_distance(&[0.3, -2.0], &[0.3, -2.0], &[1.0, 0.0], &[5.0, 2.0], 0.01).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(weighted_sq_distance(&[1.0], &[1.0, 2.0], &[1.0], &[1.0], 0.01).is_err());
    }

    #[test]
    fn registry_aliases() {
        assert_eq!(kernel("with-sigma").unwrap().name(), "uncertainty-weighted");
        assert_eq!(kernel("without-sigma").unwrap().name(), "euclidean");
        assert_eq!(kernel_names(), vec!["euclidean", "uncertainty-weighted"]);
    }
}
