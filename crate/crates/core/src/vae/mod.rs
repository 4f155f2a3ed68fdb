//! Convolutional variational autoencoder with encoding normalization.
//!
//! The encoder ends in a dense head producing `(mu | sigma)`; the sigma half
//! passes through `|x|` so standard deviations are non-negative before any
//! normalization. Normalized objectives then apply [`encoding_normalize`]
//! with the statistics of the batch (during training) or of the whole
//! encoded dataset (during [`VaeModel::encode_dataset`]).

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod schedule;
pub mod sobel;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_batch, compose, flip_horizontal, rot90, DIHEDRAL_ORDER};
pub use checkpoint::Checkpoint;
pub use loss::{loss_full, loss_traditional, objective, objective_names, Evaluation, LossTerms, Objective, VaeLossConfig};
pub use schedule::{adam_step, beta1_at, lr_at, AdamState, TrainSchedule};
pub use sobel::{sobel_batch, sobel_features};
pub use train::{read_trace, train, write_trace, TraceRow, TrainOptions, Trainer};

use crate::error::{Error, Result};
use crate::nn::gradcheck::Differentiable;
use crate::nn::{encoding_normalize, LayerSpec, Mode, Param, Sequential};
use crate::tensor::Tensor;

/// Per-example means and standard deviations, both `[B, u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LatentBatch {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.ndim() != 2 {
            return Err(Error::dim("latent batch", "[B, u]", format!("{:?}", mu.shape())));
        }
        sigma.expect_shape("latent sigma", mu.shape())?;
        if let Some(i) = sigma.data().iter().position(|&s| !(s >= 0.0)) {
            return Err(Error::Domain(format!(
                "sigma[{}][{}] = {} is negative or NaN",
                i / mu.row_len(),
                i % mu.row_len(),
                sigma.data()[i]
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent(&self) -> usize {
        self.mu.row_len()
    }

    pub fn normalized(&self, lambda_mu: f64, epsilon_bn: f64) -> Result<LatentBatch> {
        let (mu, sigma) = encoding_normalize(&self.mu, &self.sigma, lambda_mu, epsilon_bn)?;
        Ok(LatentBatch { mu, sigma })
    }

    /// Stacks into a `[2, N, u]` array (means first).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.mu.data().to_vec();
        data.extend_from_slice(self.sigma.data());
        Tensor::new(vec![2, self.len(), self.latent()], data).expect("matching halves")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[2, n, u] = t.shape() else {
            return Err(Error::dim("latent array", "[2, N, u]", format!("{:?}", t.shape())));
        };
        let half = n * u;
        Self::new(
            Tensor::new(vec![n, u], t.data()[..half].to_vec())?,
            Tensor::new(vec![n, u], t.data()[half..].to_vec())?,
        )
    }
}

pub fn encoding_normalize_batch(batch: &LatentBatch, lambda_mu: f64, epsilon_bn: f64) -> Result<LatentBatch> {
    batch.normalized(lambda_mu, epsilon_bn)
}

/// `z = mu + sigma * noise`.
pub fn reparameterize(batch: &LatentBatch, noise: &Tensor) -> Result<Tensor> {
    noise.expect_shape("reparameterization noise", batch.mu.shape())?;
    let mut z = batch.mu.clone();
    for ((zi, s), e) in z.data_mut().iter_mut().zip(batch.sigma.data()).zip(noise.data()) {
        *zi += s * e;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeArchitecture {
    /// Input side length; must be divisible by `2^channels.len()`.
    pub side: usize,
    pub latent: usize,
    /// Output channels of the stride-2 encoder blocks, mirrored by the generator.
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        Self {
            side: 96,
            latent: 64,
            channels: vec![32, 64, 128],
            kernel: 3,
        }
    }
}

impl VaeArchitecture {
    pub fn validate(&self) -> Result<()> {
        let depth = self.channels.len() as u32;
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("architecture needs at least one non-empty conv block".into()));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent size must be >= 1".into()));
        }
        let step = 1usize << depth;
        if self.side < step || self.side % step != 0 {
            return Err(Error::Config(format!(
                "side {} must be a positive multiple of 2^{depth} = {step}",
                self.side
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        let c = *self.channels.last().expect("validated");
        (c, self.side >> self.channels.len())
    }

    /// Conv blocks, flatten, dense to `2u`, `|x|` on the sigma half.
    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for &c in &self.channels {
            specs.push(LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: c,
                kernel: self.kernel,
                stride: 2,
            });
            specs.push(LayerSpec::BatchNorm { features: c });
            specs.push(LayerSpec::Relu);
            cin = c;
        }
        let (c, s) = self.bottleneck();
        specs.push(LayerSpec::Reshape { shape: vec![c * s * s] });
        specs.push(LayerSpec::Dense {
            inputs: c * s * s,
            outputs: 2 * self.latent,
        });
        specs.push(LayerSpec::Abs { offset: self.latent });
        specs
    }

    /// Dense to the bottleneck, then upsample + conv blocks back to one channel.
    pub fn generator_specs(&self) -> Vec<LayerSpec> {
        let (c, s) = self.bottleneck();
        let mut specs = vec![
            LayerSpec::Dense {
                inputs: self.latent,
                outputs: c * s * s,
            },
            LayerSpec::BatchNorm { features: c * s * s },
            LayerSpec::Relu,
            LayerSpec::Reshape { shape: vec![c, s, s] },
        ];
        for i in (0..self.channels.len()).rev() {
            let cout = self.channels[i.saturating_sub(1)];
            specs.push(LayerSpec::Upsample { factor: 2 });
            specs.push(LayerSpec::Conv2d {
                in_channels: self.channels[i],
                out_channels: cout,
                kernel: self.kernel,
                stride: 1,
            });
            specs.push(LayerSpec::BatchNorm { features: cout });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Conv2d {
            in_channels: self.channels[0],
            out_channels: 1,
            kernel: self.kernel,
            stride: 1,
        });
        specs
    }
}

/// Encoder, generator, and the objective that ties them together.
pub struct VaeModel {
    architecture: VaeArchitecture,
    loss: VaeLossConfig,
    objective: &'static dyn Objective,
    encoder: Sequential,
    generator: Sequential,
    /// Optimizer steps applied so far.
    pub iterations: u64,
    cache: Option<StepCache>,
}

struct StepCache {
    raw: Tensor,
    noise: Tensor,
}

/// One forward/backward result.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub terms: LossTerms,
    pub generated: Tensor,
}

impl VaeModel {
    pub fn new(architecture: VaeArchitecture, loss: VaeLossConfig, seed: u64) -> Result<Self> {
        architecture.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Sequential::from_specs(&architecture.encoder_specs(), &mut rng)?;
        let generator = Sequential::from_specs(&architecture.generator_specs(), &mut rng)?;
        Ok(Self {
            objective: loss.objective()?,
            architecture,
            loss,
            encoder,
            generator,
            iterations: 0,
            cache: None,
        })
    }

    pub fn architecture(&self) -> &VaeArchitecture {
        &self.architecture
    }

    pub fn loss_config(&self) -> &VaeLossConfig {
        &self.loss
    }

    pub fn objective(&self) -> &'static dyn Objective {
        self.objective
    }

    pub fn latent(&self) -> usize {
        self.architecture.latent
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.generator.param_count()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.generator.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.generator.params_mut());
        p
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut b = self.encoder.buffers();
        b.extend(self.generator.buffers());
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut b = self.encoder.buffers_mut();
        b.extend(self.generator.buffers_mut());
        b
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = self.architecture.side;
        match *images.shape() {
            [b, 1, h, w] if h == s && w == s => Ok(b),
            ref sh => Err(Error::dim("vae input", format!("[B, 1, {s}, {s}]"), format!("{sh:?}"))),
        }
    }

    /// Raw encoder output split into `(mu, sigma)`, before any normalization.
    fn encode_raw(&mut self, images: &Tensor, mode: Mode) -> Result<LatentBatch> {
        let h = self.encoder.forward(images, mode)?;
        let (mu, sigma) = h.hsplit(self.latent())?;
        Ok(LatentBatch { mu, sigma })
    }

    fn latents_for_loss(&self, raw: &LatentBatch) -> Result<LatentBatch> {
        if self.objective.normalizes_encoding() {
            raw.normalized(self.loss.lambda_mu, self.loss.epsilon_bn)
        } else {
            Ok(raw.clone())
        }
    }

    /// Forward pass in training mode; returns the loss and the evaluation.
    fn forward(&mut self, images: &Tensor, noise: &Tensor) -> Result<(Evaluation, Tensor)> {
        let b = self.check_images(images)?;
        noise.expect_shape("vae noise", &[b, self.latent()])?;
        let raw = self.encode_raw(images, Mode::Train)?;
        let latents = self.latents_for_loss(&raw)?;
        let z = reparameterize(&latents, noise)?;
        let generated = self.generator.forward(&z, Mode::Train)?;
        let eval = self
            .objective
            .evaluate(&self.loss, &generated, images, &latents.mu, &latents.sigma)?;
        self.cache = Some(StepCache {
            raw: Tensor::hcat(&raw.mu, &raw.sigma)?,
            noise: noise.clone(),
        });
        Ok((eval, generated))
    }

    /// Loss only; running statistics are still updated.
    pub fn loss(&mut self, images: &Tensor, noise: &Tensor) -> Result<LossTerms> {
        Ok(self.forward(images, noise)?.0.terms)
    }

    /// Forward and backward pass; parameter gradients are overwritten.
    pub fn forward_backward(&mut self, images: &Tensor, noise: &Tensor) -> Result<StepOutput> {
        let (eval, generated) = self.forward(images, noise)?;
        let cache = self.cache.take().ok_or_else(|| Error::State("missing forward cache".into()))?;
        let dz = self.generator.backward(&eval.d_generated)?;
        let mut d_mu = eval.d_mu.clone();
        let mut d_sigma = eval.d_sigma.clone();
        for (((dm, ds), g), e) in d_mu
            .data_mut()
            .iter_mut()
            .zip(d_sigma.data_mut())
            .zip(dz.data())
            .zip(cache.noise.data())
        {
            *dm += g;
            *ds += g * e;
        }
        let mut d_latent = Tensor::hcat(&d_mu, &d_sigma)?;
        if self.objective.normalizes_encoding() {
            let mut norm = crate::nn::EncodingNorm::new(self.latent(), self.loss.lambda_mu, self.loss.epsilon_bn);
            crate::nn::Layer::forward(&mut norm, &cache.raw, Mode::Train)?;
            d_latent = crate::nn::Layer::backward(&mut norm, &d_latent)?;
        }
        self.encoder.backward(&d_latent)?;
        Ok(StepOutput {
            terms: eval.terms,
            generated,
        })
    }

    /// Encodes every image in inference mode. Normalized objectives apply
    /// encoding normalization with statistics over the whole set.
    pub fn encode_dataset(&mut self, images: &Tensor) -> Result<LatentBatch> {
        let n = self.check_images(images)?;
        if self.iterations == 0 {
            log::warn!("encoding with an untrained model");
        }
        let raw = self.encode_raw(images, Mode::Inference)?;
        if !self.objective.normalizes_encoding() {
            return Ok(raw);
        }
        if n == 1 {
            let twice = LatentBatch {
                mu: Tensor::stack(&[raw.mu.clone(), raw.mu.clone()])?.reshape(&[2, self.latent()])?,
                sigma: Tensor::stack(&[raw.sigma.clone(), raw.sigma])?.reshape(&[2, self.latent()])?,
            };
            let norm = self.latents_for_loss(&twice)?;
            return Ok(LatentBatch {
                mu: norm.mu.select_rows(&[0])?,
                sigma: norm.sigma.select_rows(&[0])?,
            });
        }
        self.latents_for_loss(&raw)
    }

    /// Reconstructs images from latent vectors in inference mode.
    pub fn generate(&mut self, z: &Tensor) -> Result<Tensor> {
        self.generator.forward(z, Mode::Inference)
    }
}

/// Exposes the model's total loss at fixed images and noise as a function
/// of its parameters for gradient checking.
pub struct VaeProbe<'a> {
    model: &'a mut VaeModel,
    images: Tensor,
    noise: Tensor,
    offsets: Vec<(usize, usize)>,
}

impl<'a> VaeProbe<'a> {
    pub fn new(model: &'a mut VaeModel, images: Tensor, noise: Tensor) -> Self {
        let mut start = 0;
        let offsets = model
            .params()
            .iter()
            .map(|p| {
                let r = (start, p.value.len());
                start += p.value.len();
                r
            })
            .collect();
        Self {
            model,
            images,
            noise,
            offsets,
        }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&(s, _)| s <= i) - 1;
        (t, i - self.offsets[t].0)
    }
}

impl Differentiable for VaeProbe<'_> {
    fn param_count(&self) -> usize {
        self.offsets.last().map_or(0, |&(s, l)| s + l)
    }

    fn get(&self, i: usize) -> f64 {
        let (t, k) = self.locate(i);
        self.model.params()[t].value.data()[k]
    }

    fn set(&mut self, i: usize, value: f64) {
        let (t, k) = self.locate(i);
        self.model.params_mut()[t].value.data_mut()[k] = value;
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.model.loss(&self.images, &self.noise)?.total)
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)> {
        let out = self.model.forward_backward(&self.images, &self.noise)?;
        let grad = self
            .model
            .params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect();
        Ok((out.terms.total, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(mode: &str) -> VaeModel {
        let arch = VaeArchitecture {
            side: 8,
            latent: 3,
            channels: vec![2, 3],
            kernel: 3,
        };
        VaeModel::new(arch, VaeLossConfig::with_mode(mode), 7).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::full(&[1, 1], 1.0);
        let b = LatentBatch::new(mu.clone(), Tensor::full(&[1, 1], 2.0)).unwrap();
        assert_eq!(reparameterize(&b, &Tensor::full(&[1, 1], 0.5)).unwrap().data(), &[2.0]);
        let zero = LatentBatch::new(mu.clone(), Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(reparameterize(&zero, &Tensor::full(&[1, 1], 3.0)).unwrap(), mu);
        assert!(reparameterize(&b, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(LatentBatch::new(Tensor::zeros(&[1, 1]), Tensor::full(&[1, 1], -1.0)).is_err());
    }

    #[test]
    fn generator_mirrors_encoder_shape() {
        let mut m = tiny("full");
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 13) as f64 / 13.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Tensor::from_fn(&[4, 3], |_| StandardNormal.sample(&mut rng));
        let out = m.forward_backward(&x, &noise).unwrap();
        assert_eq!(out.generated.shape(), x.shape());
        let enc = m.encode_dataset(&x).unwrap();
        assert_eq!(enc.mu.shape(), &[4, 3]);
        assert_eq!(enc, m.encode_dataset(&x).unwrap());
    }

    #[test]
    fn single_example_encodes_to_zero_mean() {
        let mut m = tiny("full");
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 5) as f64);
        let enc = m.encode_dataset(&x).unwrap();
        assert!(enc.mu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_side_rejected() {
        let arch = VaeArchitecture {
            side: 12,
            channels: vec![4, 4, 4],
            ..VaeArchitecture::default()
        };
        assert!(matches!(VaeModel::new(arch, VaeLossConfig::default(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn latent_array_round_trip() {
        let b = LatentBatch::new(Tensor::from_fn(&[3, 2], |i| i as f64), Tensor::full(&[3, 2], 0.5)).unwrap();
        let t = b.to_tensor();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(LatentBatch::from_tensor(&t).unwrap(), b);
    }
}
