//! Layers with explicit forward and backward passes.
//!
//! Each layer caches what it needs during `forward` and consumes it in
//! `backward`; calling `backward` first is a state error. Parameter gradients
//! are overwritten (not accumulated) by each backward pass.

mod batch_norm;
mod conv;
mod dense;
mod elementwise;
mod encoding_norm;
pub mod gradcheck;
mod reshape;

use std::ops::Range;
use std::sync::LazyLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use batch_norm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use conv::{reflect_index, Conv2d};
pub use dense::Dense;
pub use elementwise::{Abs, Relu};
pub use encoding_norm::{encoding_normalize, EncodingNorm};
pub use reshape::{Reshape, Upsample};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Tracked running statistics.
    Inference,
}

/// A trainable tensor and the gradient from the most recent backward pass.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    /// `|x|` on feature columns `offset..`; offset 0 covers everything.
    Abs {
        #[serde(default)]
        offset: usize,
    },
    /// Normalizes a `[B, 2u]` block laid out as `(mu | sigma)`.
    EncodingNorm {
        latent: usize,
        lambda_mu: f64,
        epsilon: f64,
    },
    /// Nearest-neighbour upsampling of `[B, C, H, W]`.
    Upsample {
        factor: usize,
    },
    /// Reshapes each example to `shape`.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch-norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Abs { .. } => "abs",
            LayerSpec::EncodingNorm { .. } => "encoding-norm",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Checks the size invariants of the layer kind.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} layer: {msg}", self.kind())));
        match *self {
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                bad(format!("units must be >= 1, got {inputs} -> {outputs}"))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if kernel == 0 || kernel % 2 == 0 {
                    bad(format!("kernel extent must be odd and >= 1, got {kernel}"))
                } else if stride == 0 {
                    bad("stride must be >= 1".into())
                } else if in_channels == 0 || out_channels == 0 {
                    bad("channel counts must be >= 1".into())
                } else {
                    Ok(())
                }
            }
            LayerSpec::BatchNorm { features: 0 } => bad("features must be >= 1".into()),
            LayerSpec::EncodingNorm {
                latent,
                lambda_mu,
                epsilon,
            } => {
                if latent == 0 {
                    bad("latent size must be >= 1".into())
                } else if !(lambda_mu > 0.0) || !(epsilon > 0.0) {
                    bad(format!("lambda_mu and epsilon must be > 0, got {lambda_mu}, {epsilon}"))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Upsample { factor: 0 } => bad("factor must be >= 1".into()),
            LayerSpec::Reshape { ref shape } if shape.is_empty() || shape.contains(&0) => {
                bad(format!("invalid target shape {shape:?}"))
            }
            _ => Ok(()),
        }
    }
}

pub trait Layer: Send + Sync {
    fn spec(&self) -> LayerSpec;

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Returns the gradient with respect to the input of the last forward.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Non-trainable state that still belongs in a checkpoint.
    fn buffers(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

pub type LayerConstructor = fn(&LayerSpec, &mut dyn RngCore) -> Result<Box<dyn Layer>>;

static LAYERS: LazyLock<Registry<LayerConstructor>> = LazyLock::new(|| {
    let mut r: Registry<LayerConstructor> = Registry::new("layer kind");
    r.register("dense", |s, rng| match *s {
        LayerSpec::Dense { inputs, outputs } => Ok(Box::new(Dense::new(inputs, outputs, rng))),
        _ => unreachable!(),
    })
    .register("conv2d", |s, rng| match *s {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => Ok(Box::new(Conv2d::new(in_channels, out_channels, kernel, stride, rng))),
        _ => unreachable!(),
    })
    .register("batch-norm", |s, _| match *s {
        LayerSpec::BatchNorm { features } => Ok(Box::new(BatchNorm::new(features))),
        _ => unreachable!(),
    })
    .register("relu", |_, _| Ok(Box::new(Relu::default())))
    .register("abs", |s, _| match *s {
        LayerSpec::Abs { offset } => Ok(Box::new(Abs::new(offset))),
        _ => unreachable!(),
    })
    .register("encoding-norm", |s, _| match *s {
        LayerSpec::EncodingNorm {
            latent,
            lambda_mu,
            epsilon,
        } => Ok(Box::new(EncodingNorm::new(latent, lambda_mu, epsilon))),
        _ => unreachable!(),
    })
    .register("upsample", |s, _| match *s {
        LayerSpec::Upsample { factor } => Ok(Box::new(Upsample::new(factor))),
        _ => unreachable!(),
    })
    .register("reshape", |s, _| match s {
        LayerSpec::Reshape { shape } => Ok(Box::new(Reshape::new(shape.clone()))),
        _ => unreachable!(),
    });
    r
});

pub fn layer_kinds() -> Vec<&'static str> {
    LAYERS.names()
}

/// Builds a freshly initialized layer from its spec.
pub fn build_layer(spec: &LayerSpec, rng: &mut dyn RngCore) -> Result<Box<dyn Layer>> {
    spec.validate()?;
    LAYERS.get(spec.kind())?(spec, rng)
}

/// A chain of layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut dyn RngCore) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| build_layer(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn layer(&self, i: usize) -> &dyn Layer {
        self.layers[i].as_ref()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_range(0..self.layers.len(), input, mode)
    }

    pub fn forward_range(&mut self, range: Range<usize>, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers[range] {
            x = layer.forward(&x, mode)?;
            x.ensure_finite(layer.spec().kind())?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        self.backward_range(0..self.layers.len(), upstream)
    }

    pub fn backward_range(&mut self, range: Range<usize>, upstream: &Tensor) -> Result<Tensor> {
        let mut g = upstream.clone();
        for layer in self.layers[range].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn missing_forward(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called before forward"))
}

/// Uniform initialization with bound `sqrt(3 / fan_in)` (unit variance for unit inputs).
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    use rand::Rng;
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_spec_kind_is_registered() {
        let specs = [
            LayerSpec::Dense { inputs: 2, outputs: 3 },
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::BatchNorm { features: 2 },
            LayerSpec::Relu,
            LayerSpec::Abs { offset: 0 },
            LayerSpec::EncodingNorm {
                latent: 2,
                lambda_mu: 2.5,
                epsilon: 1e-8,
            },
            LayerSpec::Upsample { factor: 2 },
            LayerSpec::Reshape { shape: vec![4] },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &specs {
            let layer = build_layer(s, &mut rng).unwrap();
            assert_eq!(&layer.spec(), s);
        }
        assert_eq!(layer_kinds().len(), specs.len());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: 1,
            },
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 0,
            },
            LayerSpec::Dense { inputs: 0, outputs: 1 },
        ] {
            assert!(matches!(build_layer(&s, &mut rng), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn spec_serde_uses_kind_tag() {
        let s = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 8,
            kernel: 3,
            stride: 2,
        };
        let text = toml::to_string(&s).unwrap();
        assert!(text.contains("kind = \"conv2d\""), "{text}");
        let back: LayerSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Sequential::from_specs(
            &[LayerSpec::Dense { inputs: 2, outputs: 2 }, LayerSpec::Relu],
            &mut rng,
        )
        .unwrap();
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }
}
