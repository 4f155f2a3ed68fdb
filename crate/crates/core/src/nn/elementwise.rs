use super::{missing_forward, Layer, LayerSpec, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Layer for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(input.clone());
        Ok(input.map(|x| x.max(0.0)))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or_else(|| missing_forward("relu"))?;
        input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })
    }
}

/// Absolute value applied to the trailing feature columns `offset..` of a
/// `[B, F]` input, or to every element when `offset` is 0.
pub struct Abs {
    offset: usize,
    cache: Option<Tensor>,
}

impl Abs {
    pub fn new(offset: usize) -> Self {
        Self { offset, cache: None }
    }

    fn covers(&self, i: usize, width: usize) -> bool {
        self.offset == 0 || i % width >= self.offset
    }

    fn width(&self, input: &Tensor) -> Result<usize> {
        if self.offset == 0 {
            return Ok(1);
        }
        if input.ndim() != 2 || input.shape()[1] <= self.offset {
            return Err(Error::dim(
                "abs input",
                format!("[B, F] with F > {}", self.offset),
                format!("{:?}", input.shape()),
            ));
        }
        Ok(input.shape()[1])
    }
}

impl Layer for Abs {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Abs { offset: self.offset }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let width = self.width(input)?;
        let mut out = input.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if self.covers(i, width) {
                *v = v.abs();
            }
        }
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or_else(|| missing_forward("abs"))?;
        upstream.expect_shape("abs upstream gradient", input.shape())?;
        let width = self.width(input)?;
        let mut dx = upstream.clone();
        for (i, (g, &x)) in dx.data_mut().iter_mut().zip(input.data()).enumerate() {
            if self.covers(i, width) {
                // Subgradient 0 at the kink.
                *g *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Ok(dx)
    }
}
