use rand::RngCore;
use rayon::prelude::*;

use super::{fan_in_uniform, missing_forward, Layer, LayerSpec, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a possibly out-of-range index onto `0..n` by mirror reflection
/// without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// 2-D convolution (cross-correlation) over `[B, C, H, W]` with reflect
/// padding of `kernel / 2`, so stride 1 preserves the spatial size and
/// stride `s` yields `ceil(H / s)`.
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    weight: Param,
    bias: Param,
    cache: Option<ConvCache>,
}

struct ConvCache {
    input_shape: Vec<usize>,
    padded: Vec<f64>,
    geom: Geometry,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            cache: None,
        }
    }

    pub fn with_params(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let &[out_channels, in_channels, kh, kw] = weight.shape() else {
            return Err(Error::dim("conv2d weight", "[out, in, k, k]", format!("{:?}", weight.shape())));
        };
        if kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(Error::Config(format!("conv2d: kernel {kh}x{kw} stride {stride}")));
        }
        bias.expect_shape("conv2d bias", &[out_channels])?;
        Ok(Self {
            in_channels,
            out_channels,
            kernel: kh,
            stride,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let pad = self.kernel / 2;
        Geometry {
            h,
            w,
            hp: h + 2 * pad,
            wp: w + 2 * pad,
            ho: (h - 1) / self.stride + 1,
            wo: (w - 1) / self.stride + 1,
        }
    }

    fn pad_sample(&self, sample: &[f64], g: Geometry, out: &mut [f64]) {
        let pad = (self.kernel / 2) as isize;
        let rows: Vec<usize> = (0..g.hp).map(|y| reflect_index(y as isize - pad, g.h)).collect();
        let cols: Vec<usize> = (0..g.wp).map(|x| reflect_index(x as isize - pad, g.w)).collect();
        for c in 0..self.in_channels {
            let src = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
            let dst = &mut out[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
            for (py, &sy) in rows.iter().enumerate() {
                for (px, &sx) in cols.iter().enumerate() {
                    dst[py * g.wp + px] = src[sy * g.w + sx];
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let &[batch, c, h, w] = input.shape() else {
            return Err(Error::dim("conv2d input", "[B, C, H, W]", format!("{:?}", input.shape())));
        };
        if c != self.in_channels {
            return Err(Error::dim("conv2d input channels", self.in_channels, c));
        }
        let g = self.geometry(h, w);
        let k = self.kernel;
        let s = self.stride;
        let in_len = c * h * w;
        let pad_len = c * g.hp * g.wp;
        let out_len = self.out_channels * g.ho * g.wo;

        let mut padded = vec![0.0; batch * pad_len];
        padded
            .par_chunks_mut(pad_len)
            .zip(input.data().par_chunks(in_len))
            .for_each(|(dst, src)| self.pad_sample(src, g, dst));

        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![0.0; batch * out_len];
        out.par_chunks_mut(out_len)
            .zip(padded.par_chunks(pad_len))
            .for_each(|(out, pad)| {
                for co in 0..self.out_channels {
                    let plane = &mut out[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
                    plane.fill(bias[co]);
                    for ci in 0..self.in_channels {
                        let src = &pad[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
                        let wk = &weight[(co * self.in_channels + ci) * k * k..][..k * k];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wk[ky * k + kx];
                                for oy in 0..g.ho {
                                    let srow = &src[(oy * s + ky) * g.wp + kx..];
                                    let orow = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        *o += wv * srow[ox * s];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        self.cache = Some(ConvCache {
            input_shape: input.shape().to_vec(),
            padded,
            geom: g,
        });
        Tensor::new(vec![batch, self.out_channels, g.ho, g.wo], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let g = cache.geom;
        let batch = cache.input_shape[0];
        upstream.expect_shape("conv2d upstream gradient", &[batch, self.out_channels, g.ho, g.wo])?;
        let k = self.kernel;
        let s = self.stride;
        let pad = (k / 2) as isize;
        let pad_len = self.in_channels * g.hp * g.wp;
        let out_len = self.out_channels * g.ho * g.wo;
        let in_len = self.in_channels * g.h * g.w;
        let weight = self.weight.value.data();
        let wlen = weight.len();
        let rows: Vec<usize> = (0..g.hp).map(|y| reflect_index(y as isize - pad, g.h)).collect();
        let cols: Vec<usize> = (0..g.wp).map(|x| reflect_index(x as isize - pad, g.w)).collect();

        // Per-example partial gradients; reduced below in example order so the
        // result does not depend on thread scheduling.
        let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = cache
            .padded
            .par_chunks(pad_len)
            .zip(upstream.data().par_chunks(out_len))
            .map(|(pad_in, dout)| {
                let mut dpad = vec![0.0; pad_len];
                let mut dw = vec![0.0; wlen];
                let mut db = vec![0.0; self.out_channels];
                for co in 0..self.out_channels {
                    let gplane = &dout[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
                    db[co] = gplane.iter().sum();
                    for ci in 0..self.in_channels {
                        let src = &pad_in[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
                        let dsrc = &mut dpad[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
                        let base = (co * self.in_channels + ci) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = weight[base + ky * k + kx];
                                let mut acc = 0.0;
                                for oy in 0..g.ho {
                                    let off = (oy * s + ky) * g.wp + kx;
                                    let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc += gv * src[off + ox * s];
                                        dsrc[off + ox * s] += wv * gv;
                                    }
                                }
                                dw[base + ky * k + kx] = acc;
                            }
                        }
                    }
                }
                let mut dx = vec![0.0; in_len];
                for c in 0..self.in_channels {
                    let dsrc = &dpad[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
                    let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for (py, &sy) in rows.iter().enumerate() {
                        for (px, &sx) in cols.iter().enumerate() {
                            dst[sy * g.w + sx] += dsrc[py * g.wp + px];
                        }
                    }
                }
                (dx, dw, db)
            })
            .collect();

        let mut dx = Vec::with_capacity(batch * in_len);
        let mut dw = vec![0.0; wlen];
        let mut db = vec![0.0; self.out_channels];
        for (pdx, pdw, pdb) in partials {
            dx.extend_from_slice(&pdx);
            dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&pdb).for_each(|(a, b)| *a += b);
        }
        self.weight.grad = Tensor::new(self.weight.value.shape().to_vec(), dw)?;
        self.bias.grad = Tensor::new(vec![self.out_channels], db)?;
        Tensor::new(cache.input_shape.clone(), dx)
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
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(2, 2), 0);
    }

    #[test]
    fn one_hot_kernel_shifts_interior() {
        // Tap at (ky, kx) = (0, 2) reads input[y - 1][x + 1].
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[2] = 1.0;
        let mut conv = Conv2d::with_params(w, Tensor::zeros(&[1]), 1).unwrap();
        let x = Tensor::from_fn(&[1, 1, 6, 6], |i| (i * i % 17) as f64);
        let y = conv.forward(&x, Mode::Train).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(y.data()[r * 6 + c], x.data()[(r - 1) * 6 + c + 1]);
            }
        }
    }

    #[test]
    fn stride_two_halves_extent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let mut conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let y = conv.forward(&Tensor::zeros(&[4, 2, 16, 16]), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[4, 3, 8, 8]);
        let y = conv.forward(&Tensor::zeros(&[1, 2, 5, 5]), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut conv = Conv2d::with_params(Tensor::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[1]), 1).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[1, 1, 4, 4]), Mode::Train).is_err());
    }
}
