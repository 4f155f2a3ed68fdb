//! Batch-statistics normalization of latent normal distributions.
//!
//! Means are centred per feature and rescaled to standard deviation
//! `lambda_mu`; standard deviations are divided by twice their batch standard
//! deviation and never centred, so non-negative inputs stay non-negative.
//! Both denominators carry `+ epsilon`.

use super::{missing_forward, Layer, LayerSpec, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ColumnStats {
    mean: f64,
    std: f64,
}

fn column_stats(x: &Tensor, col: usize) -> ColumnStats {
    let b = x.rows();
    let width = x.row_len();
    let rough = (0..b).map(|i| x.data()[i * width + col]).sum::<f64>() / b as f64;
    // Compensated two-pass mean.
    let mean = rough + (0..b).map(|i| x.data()[i * width + col] - rough).sum::<f64>() / b as f64;
    let var = (0..b)
        .map(|i| (x.data()[i * width + col] - mean).powi(2))
        .sum::<f64>()
        / b as f64;
    ColumnStats {
        mean,
        std: var.max(0.0).sqrt(),
    }
}

fn check_pair(mu: &Tensor, sigma: &Tensor) -> Result<(usize, usize)> {
    if mu.ndim() != 2 {
        return Err(Error::dim("encoding normalization", "[B, u]", format!("{:?}", mu.shape())));
    }
    sigma.expect_shape("encoding normalization sigma", mu.shape())?;
    let (b, u) = (mu.shape()[0], mu.shape()[1]);
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    Ok((b, u))
}

/// Applies encoding normalization to a `[B, u]` pair of means and standard
/// deviations using the statistics of this batch.
pub fn encoding_normalize(mu: &Tensor, sigma: &Tensor, lambda_mu: f64, epsilon: f64) -> Result<(Tensor, Tensor)> {
    let (b, u) = check_pair(mu, sigma)?;
    let mut mu_out = Tensor::zeros(&[b, u]);
    let mut sigma_out = Tensor::zeros(&[b, u]);
    for j in 0..u {
        let ms = column_stats(mu, j);
        let ss = column_stats(sigma, j);
        let mu_scale = lambda_mu / (ms.std + epsilon);
        let sigma_den = 2.0 * ss.std + epsilon;
        for i in 0..b {
            let k = i * u + j;
            mu_out.data_mut()[k] = mu_scale * (mu.data()[k] - ms.mean);
            sigma_out.data_mut()[k] = sigma.data()[k] / sigma_den;
        }
    }
    Ok((mu_out, sigma_out))
}

/// Layer form of [`encoding_normalize`] over a `[B, 2u]` block `(mu | sigma)`.
///
/// It always uses the statistics of the batch it is given, in both modes.
pub struct EncodingNorm {
    latent: usize,
    lambda_mu: f64,
    epsilon: f64,
    cache: Option<(Tensor, Tensor)>,
}

impl EncodingNorm {
    pub fn new(latent: usize, lambda_mu: f64, epsilon: f64) -> Self {
        Self {
            latent,
            lambda_mu,
            epsilon,
            cache: None,
        }
    }
}

impl Layer for EncodingNorm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::EncodingNorm {
            latent: self.latent,
            lambda_mu: self.lambda_mu,
            epsilon: self.epsilon,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        if input.ndim() != 2 || input.shape()[1] != 2 * self.latent {
            return Err(Error::dim(
                "encoding-norm input",
                format!("[B, {}]", 2 * self.latent),
                format!("{:?}", input.shape()),
            ));
        }
        let (mu, sigma) = input.hsplit(self.latent)?;
        let (m, s) = encoding_normalize(&mu, &sigma, self.lambda_mu, self.epsilon)?;
        self.cache = Some((mu, sigma));
        Tensor::hcat(&m, &s)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (mu, sigma) = self.cache.as_ref().ok_or_else(|| missing_forward("encoding-norm"))?;
        let (b, u) = (mu.rows(), self.latent);
        upstream.expect_shape("encoding-norm upstream gradient", &[b, 2 * u])?;
        let (g_mu, g_sigma) = upstream.hsplit(u)?;
        let bf = b as f64;
        let mut d_mu = Tensor::zeros(&[b, u]);
        let mut d_sigma = Tensor::zeros(&[b, u]);
        for j in 0..u {
            let col = |t: &Tensor, i: usize| t.data()[i * u + j];

            // y = lambda c / (s + eps), c = mu - mean, s = sqrt(mean(c^2)).
            let ms = column_stats(mu, j);
            let den = ms.std + self.epsilon;
            let gc: f64 = (0..b).map(|i| col(&g_mu, i) * (col(mu, i) - ms.mean)).sum();
            let mut dc = vec![0.0; b];
            for (i, d) in dc.iter_mut().enumerate() {
                let c = col(mu, i) - ms.mean;
                let ds = if ms.std > 0.0 { c / (bf * ms.std) } else { 0.0 };
                *d = self.lambda_mu * (col(&g_mu, i) / den - gc * ds / (den * den));
            }
            let dc_mean = dc.iter().sum::<f64>() / bf;
            for (i, d) in dc.iter().enumerate() {
                d_mu.data_mut()[i * u + j] = d - dc_mean;
            }

            // y = sigma / (2 t + eps), t = std(sigma).
            let ss = column_stats(sigma, j);
            let den = 2.0 * ss.std + self.epsilon;
            let gs: f64 = (0..b).map(|i| col(&g_sigma, i) * col(sigma, i)).sum();
            for i in 0..b {
                let dt = if ss.std > 0.0 {
                    (col(sigma, i) - ss.mean) / (bf * ss.std)
                } else {
                    0.0
                };
                d_sigma.data_mut()[i * u + j] = col(&g_sigma, i) / den - 2.0 * gs * dt / (den * den);
            }
        }
        Tensor::hcat(&d_mu, &d_sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn two_point_column() {
        let (m, s) = encoding_normalize(&col(&[1.0, 3.0]), &col(&[1.0, 3.0]), 2.5, 1e-8).unwrap();
        assert!((m.data()[0] + 2.5).abs() < 1e-7);
        assert!((m.data()[1] - 2.5).abs() < 1e-7);
        // Population std of [1, 3] is 1, so sigma / (2 * 1).
        assert!((s.data()[0] - 0.5).abs() < 1e-8);
        assert!((s.data()[1] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn degenerate_column_maps_to_zero() {
        let (m, s) = encoding_normalize(&col(&[5.0, 5.0]), &col(&[2.0, 2.0]), 2.5, 1e-8).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0]);
        // Constant sigma divides by epsilon alone; large but finite.
        assert!(s.is_finite());
    }

    #[test]
    fn single_example_rejected() {
        let err = encoding_normalize(&col(&[1.0]), &col(&[1.0]), 2.5, 1e-8).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }
}
