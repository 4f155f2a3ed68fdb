//! Per-image preprocessing on single-channel `[H, W]` images.

use crate::error::{Error, Result};
use crate::nn::reflect_index;
use crate::tensor::Tensor;

pub const BLUR_SIZE: usize = 5;
pub const BLUR_STD: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: Tensor,
    /// Set when every pixel was equal; the image is then all zeros.
    pub constant: bool,
}

fn dims(image: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w)),
        [h, w, 1] => Ok((h, w)),
        ref s => Err(Error::dim(context, "[H, W] or [H, W, 1]", format!("{s:?}"))),
    }
}

/// Linearly maps pixel values onto `[0, 1]`.
pub fn minmax_normalize(image: &Tensor) -> Result<Normalized> {
    let (_, w) = dims(image, "minmax_normalize")?;
    if let Some(i) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "pixel (row {}, col {}) is {}",
            i / w,
            i % w,
            image.data()[i]
        )));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(Normalized {
            image: Tensor::zeros(image.shape()),
            constant: true,
        });
    }
    let range = hi - lo;
    Ok(Normalized {
        image: image.map(|v| (v - lo) / range),
        constant: false,
    })
}

/// Normalized `size x size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, std: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - half;
            let x = (i % size) as f64 - half;
            (-(x * x + y * y) / (2.0 * std * std)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Correlates an image with a square kernel using reflect padding.
pub(crate) fn correlate_reflect(image: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = reflect_index(y as isize + ky as isize - half, h);
                for kx in 0..size {
                    let sx = reflect_index(x as isize + kx as isize - half, w);
                    acc += kernel[ky * size + kx] * image[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// 5x5 Gaussian blur with 2.5 px standard deviation.
pub fn gaussian_blur_5x5(image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image, "gaussian_blur_5x5")?;
    if h < BLUR_SIZE || w < BLUR_SIZE {
        return Err(Error::Domain(format!(
            "image {h}x{w} is smaller than the {BLUR_SIZE}x{BLUR_SIZE} blur kernel"
        )));
    }
    let k = gaussian_kernel(BLUR_SIZE, BLUR_STD);
    Tensor::new(image.shape().to_vec(), correlate_reflect(image.data(), h, w, &k, BLUR_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_interior() {
        let n = minmax_normalize(&Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(n.image.data(), &[0.0, 1.0]);
        assert!(!n.constant);
        let n = minmax_normalize(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 5.0]).unwrap()).unwrap();
        assert_eq!(n.image.data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn constant_image_flagged() {
        let n = minmax_normalize(&Tensor::full(&[3, 3], 7.0)).unwrap();
        assert!(n.constant);
        assert!(n.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_pixel_reports_coordinates() {
        let mut t = Tensor::zeros(&[3, 4]);
        t.data_mut()[6] = f64::NAN;
        let err = minmax_normalize(&t).unwrap_err().to_string();
        assert!(err.contains("row 1, col 2"), "{err}");
    }

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel(5, 2.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.iter().all(|&v| v > 0.0));
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(k[y * 5 + x], k[y * 5 + (4 - x)]);
                assert_eq!(k[y * 5 + x], k[(4 - y) * 5 + x]);
                assert_eq!(k[y * 5 + x], k[x * 5 + y]);
            }
        }
    }

    #[test]
    fn blur_preserves_constants_and_rejects_small() {
        let c = Tensor::full(&[6, 7], 0.3);
        let b = gaussian_blur_5x5(&c).unwrap();
        assert!(b.max_abs_diff(&c) < 1e-15);
        assert!(gaussian_blur_5x5(&Tensor::zeros(&[4, 8])).is_err());
    }
}
