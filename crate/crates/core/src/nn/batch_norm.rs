use super::{missing_forward, Layer, LayerSpec, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization over `[B, F]` (per feature) or `[B, C, H, W]`
/// (per channel, pooling the spatial positions).
pub struct BatchNorm {
    features: usize,
    gamma: Param,
    beta: Param,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<BnCache>,
}

struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            gamma: Param::new(Tensor::full(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            cache: None,
        }
    }

    fn layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let ok = match shape.len() {
            2 | 4 => shape[1] == self.features,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(
                "batch-norm input",
                format!("[B, {}] or [B, {}, H, W]", self.features, self.features),
                format!("{shape:?}"),
            ));
        }
        let spatial = shape[2..].iter().product::<usize>();
        Ok((shape[0], spatial))
    }
}

impl Layer for BatchNorm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm {
            features: self.features,
        }
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (batch, spatial) = self.layout(input.shape())?;
        let c = self.features;
        let m = (batch * spatial) as f64;
        let x = input.data();
        let idx = |b: usize, f: usize, s: usize| (b * c + f) * spatial + s;

        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for f in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            sum += x[idx(b, f, s)];
                        }
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            let d = x[idx(b, f, s)] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / m;
                    let rm = &mut self.running_mean.data_mut()[f];
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean;
                    let rv = &mut self.running_var.data_mut()[f];
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var;
                    (mean, var)
                }
                Mode::Inference => (self.running_mean.data()[f], self.running_var.data()[f]),
            };
            let istd = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[f] = istd;
            for b in 0..batch {
                for s in 0..spatial {
                    let i = idx(b, f, s);
                    xhat[i] = (x[i] - mean) * istd;
                }
            }
        }

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for f in 0..c {
                for s in 0..spatial {
                    let i = idx(b, f, s);
                    out[i] = gamma[f] * xhat[i] + beta[f];
                }
            }
        }
        self.cache = Some(BnCache {
            shape: input.shape().to_vec(),
            xhat,
            inv_std,
            mode,
        });
        Tensor::new(input.shape().to_vec(), out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("batch-norm"))?;
        upstream.expect_shape("batch-norm upstream gradient", &cache.shape)?;
        let (batch, spatial) = self.layout(&cache.shape)?;
        let c = self.features;
        let m = (batch * spatial) as f64;
        let idx = |b: usize, f: usize, s: usize| (b * c + f) * spatial + s;
        let g = upstream.data();
        let gamma = self.gamma.value.data();

        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for f in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    let i = idx(b, f, s);
                    sum_g += g[i];
                    sum_gx += g[i] * cache.xhat[i];
                }
            }
            dbeta[f] = sum_g;
            dgamma[f] = sum_gx;
            let scale = gamma[f] * cache.inv_std[f];
            for b in 0..batch {
                for s in 0..spatial {
                    let i = idx(b, f, s);
                    dx[i] = match cache.mode {
                        Mode::Train => scale * (g[i] - sum_g / m - cache.xhat[i] * sum_gx / m),
                        Mode::Inference => scale * g[i],
                    };
                }
            }
        }
        self.gamma.grad = Tensor::new(vec![c], dgamma)?;
        self.beta.grad = Tensor::new(vec![c], dbeta)?;
        Tensor::new(cache.shape.clone(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Tensor> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[8, 5], |i| rng.random_range(-3.0..3.0) * (1 + i % 5) as f64 + 4.0);
        let mut bn = BatchNorm::new(5);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for f in 0..5 {
            let col: Vec<f64> = (0..8).map(|b| y.data()[b * 5 + f]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            // eps = 1e-5 shrinks the variance by var / (var + eps).
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn running_statistics_follow_moving_average() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-15);
        // Inference uses the tracked statistics.
        let y = bn.forward(&Tensor::new(vec![1, 1], vec![0.2]).unwrap(), Mode::Inference).unwrap();
        assert!(y.data()[0].abs() < 1e-15);
    }

    #[test]
    fn spatial_layout_pools_positions() {
        let x = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64);
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for f in 0..2 {
            let mut s = 0.0;
            for b in 0..2 {
                for p in 0..9 {
                    s += y.data()[(b * 2 + f) * 9 + p];
                }
            }
            assert!(s.abs() < 1e-9);
        }
    }
}
