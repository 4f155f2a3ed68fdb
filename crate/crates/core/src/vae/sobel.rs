//! Horizontal and vertical Sobel derivatives with reflect padding.

use crate::error::{Error, Result};
use crate::nn::reflect_index;
use crate::tensor::Tensor;

/// Horizontal-derivative kernel (responds to change along x).
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Vertical-derivative kernel, the transpose of [`SOBEL_X`].
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn plane_apply(src: &[f64], h: usize, w: usize, k: &[f64; 9], dst: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..3 {
                let sy = reflect_index(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = reflect_index(x as isize + kx as isize - 1, w);
                    acc += k[ky * 3 + kx] * src[sy * w + sx];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

fn plane_adjoint(g: &[f64], h: usize, w: usize, k: &[f64; 9], dst: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for ky in 0..3 {
                let sy = reflect_index(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = reflect_index(x as isize + kx as isize - 1, w);
                    dst[sy * w + sx] += k[ky * 3 + kx] * gv;
                }
            }
        }
    }
}

fn batch_dims(images: &Tensor) -> Result<(usize, usize, usize)> {
    match *images.shape() {
        [b, 1, h, w] if h >= 3 && w >= 3 => Ok((b, h, w)),
        [_, 1, h, w] => Err(Error::Domain(format!("image {h}x{w} is smaller than the 3x3 Sobel kernel"))),
        ref s => Err(Error::dim("sobel input", "[B, 1, H, W]", format!("{s:?}"))),
    }
}

/// Sobel features of a single `[H, W]` image as `[2, H, W]`: channel 0 is
/// the horizontal derivative, channel 1 the vertical.
pub fn sobel_features(image: &Tensor) -> Result<Tensor> {
    let &[h, w] = image.shape() else {
        return Err(Error::dim("sobel_features", "[H, W]", format!("{:?}", image.shape())));
    };
    let batch = image.clone().reshape(&[1, 1, h, w])?;
    sobel_batch(&batch)?.reshape(&[2, h, w])
}

/// `[B, 1, H, W] -> [B, 2, H, W]`.
pub fn sobel_batch(images: &Tensor) -> Result<Tensor> {
    let (b, h, w) = batch_dims(images)?;
    let mut out = vec![0.0; b * 2 * h * w];
    for n in 0..b {
        let src = images.row(n);
        let dst = &mut out[n * 2 * h * w..(n + 1) * 2 * h * w];
        let (dx, dy) = dst.split_at_mut(h * w);
        plane_apply(src, h, w, &SOBEL_X, dx);
        plane_apply(src, h, w, &SOBEL_Y, dy);
    }
    Tensor::new(vec![b, 2, h, w], out)
}

/// Adjoint of [`sobel_batch`]: `[B, 2, H, W] -> [B, 1, H, W]`.
pub fn sobel_batch_adjoint(grad: &Tensor) -> Result<Tensor> {
    let &[b, 2, h, w] = grad.shape() else {
        return Err(Error::dim("sobel adjoint", "[B, 2, H, W]", format!("{:?}", grad.shape())));
    };
    let mut out = vec![0.0; b * h * w];
    for n in 0..b {
        let g = grad.row(n);
        let dst = &mut out[n * h * w..(n + 1) * h * w];
        plane_adjoint(&g[..h * w], h, w, &SOBEL_X, dst);
        plane_adjoint(&g[h * w..], h, w, &SOBEL_Y, dst);
    }
    Tensor::new(vec![b, 1, h, w], out)
}
