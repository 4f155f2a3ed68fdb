use rand::RngCore;

use super::{fan_in_uniform, missing_forward, Layer, LayerSpec, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer, `y = x W^T + b` on `[B, inputs]`.
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(fan_in_uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn with_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [outputs, inputs] = weight.shape() else {
            return Err(Error::dim("dense weight", "[outputs, inputs]", format!("{:?}", weight.shape())));
        };
        let (outputs, inputs) = (*outputs, *inputs);
        bias.expect_shape("dense bias", &[outputs])?;
        Ok(Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }
}

impl Layer for Dense {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        if input.ndim() != 2 || input.shape()[1] != self.inputs {
            return Err(Error::dim(
                "dense input",
                format!("[B, {}]", self.inputs),
                format!("{:?}", input.shape()),
            ));
        }
        let batch = input.rows();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = Tensor::zeros(&[batch, self.outputs]);
        for n in 0..batch {
            let x = input.row(n);
            let y = out.row_mut(n);
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                *yo = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or_else(|| missing_forward("dense"))?;
        let batch = input.rows();
        upstream.expect_shape("dense upstream gradient", &[batch, self.outputs])?;
        let w = self.weight.value.data();
        let mut dx = Tensor::zeros(input.shape());
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.outputs];
        for n in 0..batch {
            let x = input.row(n);
            let g = upstream.row(n);
            let dxn = dx.row_mut(n);
            for (o, &go) in g.iter().enumerate() {
                db[o] += go;
                let wrow = &w[o * self.inputs..(o + 1) * self.inputs];
                let dwrow = &mut dw[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    dxn[i] += go * wrow[i];
                    dwrow[i] += go * x[i];
                }
            }
        }
        self.weight.grad = Tensor::new(vec![self.outputs, self.inputs], dw)?;
        self.bias.grad = Tensor::new(vec![self.outputs], db)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut d = Dense::with_params(w, Tensor::zeros(&[3])).unwrap();
        let v = Tensor::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap();
        assert_eq!(d.forward(&v, Mode::Train).unwrap(), v);
    }

    #[test]
    fn scalar_backward_is_product_rule() {
        let mut d = Dense::with_params(Tensor::full(&[1, 1], 3.0), Tensor::zeros(&[1])).unwrap();
        d.forward(&Tensor::full(&[1, 1], 2.0), Mode::Train).unwrap();
        let dx = d.backward(&Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[3.0]);
        assert_eq!(d.weight.grad.data(), &[2.0]);
        assert_eq!(d.bias.grad.data(), &[1.0]);
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut d = Dense::with_params(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        let err = d.forward(&Tensor::zeros(&[4, 2]), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }
}
