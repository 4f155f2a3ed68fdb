use super::{missing_forward, Layer, LayerSpec, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reshapes every example, keeping the batch axis.
pub struct Reshape {
    shape: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            shape,
            input_shape: None,
        }
    }
}

impl Layer for Reshape {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Reshape {
            shape: self.shape.clone(),
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mut target = vec![input.rows()];
        target.extend_from_slice(&self.shape);
        self.input_shape = Some(input.shape().to_vec());
        input.clone().reshape(&target)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_forward("reshape"))?;
        upstream.clone().reshape(shape)
    }
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub struct Upsample {
    factor: usize,
    input_shape: Option<Vec<usize>>,
}

impl Upsample {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            input_shape: None,
        }
    }
}

impl Layer for Upsample {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Upsample { factor: self.factor }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let &[b, c, h, w] = input.shape() else {
            return Err(Error::dim("upsample input", "[B, C, H, W]", format!("{:?}", input.shape())));
        };
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let src = input.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    d[y * wo + x] = s[(y / f) * w + x / f];
                }
            }
        }
        self.input_shape = Some(input.shape().to_vec());
        Tensor::new(vec![b, c, ho, wo], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.clone().ok_or_else(|| missing_forward("upsample"))?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        upstream.expect_shape("upsample upstream gradient", &[b, c, ho, wo])?;
        let g = upstream.data();
        let mut dx = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            let s = &g[plane * ho * wo..(plane + 1) * ho * wo];
            let d = &mut dx[plane * h * w..(plane + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    d[(y / f) * w + x / f] += s[y * wo + x];
                }
            }
        }
        Tensor::new(shape, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_repeats_and_backward_sums() {
        let mut up = Upsample::new(2);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = up.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = up.backward(&Tensor::full(&[1, 1, 2, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0, 4.0]);
    }

    #[test]
    fn reshape_round_trip() {
        let mut r = Reshape::new(vec![2, 3]);
        let x = Tensor::from_fn(&[4, 6], |i| i as f64);
        let y = r.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(r.backward(&y).unwrap(), x);
        assert!(r.forward(&Tensor::zeros(&[4, 5]), Mode::Train).is_err());
    }
}
