//! SVD principal component analysis.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `[k, u]`, orthonormal rows.
    pub components: Tensor,
    pub mean: Vec<f64>,
    /// Per-component variance (`s^2 / (N - 1)`), non-increasing.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// `(data - mean) components^T`.
    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        self.check(data, "pca transform")?;
        let (n, k) = (data.rows(), self.k());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let centred: Vec<f64> = data.row(i).iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for c in 0..k {
                out[i * k + c] = centred.iter().zip(self.components.row(c)).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![n, k], out)
    }

    pub fn inverse_transform(&self, scores: &Tensor) -> Result<Tensor> {
        if scores.ndim() != 2 || scores.row_len() != self.k() {
            return Err(Error::dim("pca scores", format!("[N, {}]", self.k()), format!("{:?}", scores.shape())));
        }
        let (n, u) = (scores.rows(), self.features());
        let mut out = Vec::with_capacity(n * u);
        for i in 0..n {
            let s = scores.row(i);
            for f in 0..u {
                let v: f64 = (0..self.k()).map(|c| s[c] * self.components.row(c)[f]).sum();
                out.push(v + self.mean[f]);
            }
        }
        Tensor::new(vec![n, u], out)
    }

    /// Mean squared reconstruction error after projecting onto the components.
    pub fn reconstruction_error(&self, data: &Tensor) -> Result<f64> {
        let back = self.inverse_transform(&self.transform(data)?)?;
        Ok(back.data().iter().zip(data.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / data.len() as f64)
    }

    fn check(&self, data: &Tensor, context: &'static str) -> Result<()> {
        if data.ndim() != 2 || data.row_len() != self.features() {
            return Err(Error::dim(context, format!("[N, {}]", self.features()), format!("{:?}", data.shape())));
        }
        Ok(())
    }
}

/// Fits `k` components to `data` (`[N, u]`). Each component is signed so its
/// largest-magnitude entry is positive.
pub fn fit(data: &Tensor, k: usize) -> Result<PcaModel> {
    if data.ndim() != 2 {
        return Err(Error::dim("pca input", "[N, u]", format!("{:?}", data.shape())));
    }
    let (n, u) = (data.rows(), data.row_len());
    if n < 2 {
        return Err(Error::Domain(format!("pca needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(u) {
        return Err(Error::Domain(format!("k = {k} must lie in [1, min(N, u) = {}]", n.min(u))));
    }
    data.ensure_finite("pca input")?;
    let mut mean = vec![0.0; u];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, u, |i, j| data.row(i)[j] - mean[j]);
    let total_variance = centred.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64;
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::NonFinite("pca: SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let denom = (n - 1) as f64;
    let mut components = Vec::with_capacity(k * u);
    let mut explained = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut row: Vec<f64> = v_t.row(c).iter().copied().collect();
        let pivot = row.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(row);
        let s = svd.singular_values[c];
        explained.push(s * s / denom);
    }
    Ok(PcaModel {
        components: Tensor::new(vec![k, u], components)?,
        mean,
        explained_variance: explained,
        total_variance,
    })
}

/// Flattens `[N, ...]` to `[N, prod(...)]`.
pub fn flatten_rows(data: &Tensor) -> Result<Tensor> {
    let n = data.shape().first().copied().unwrap_or(0);
    let per = if n == 0 { 0 } else { data.len() / n };
    data.clone().reshape(&[n, per])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, u: usize) -> Tensor {
        Tensor::from_fn(&[n, u], |i| (((i * 2654435761) % 1000) as f64 / 500.0) - 1.0)
    }

    #[test]
    fn line_has_unit_ratio() {
        let data = Tensor::from_fn(&[10, 3], |i| {
            let t = (i / 3) as f64;
            [1.0, 2.0, -0.5][i % 3] * t + 0.3
        });
        let m = fit(&data, 1).unwrap();
        assert!((m.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
        // -0.5 is not the largest entry, 2.0 is: sign positive.
        assert!(m.components.row(0)[1] > 0.0);
    }

    #[test]
    fn complete_basis_reconstructs() {
        let data = grid(12, 5);
        let m = fit(&data, 5).unwrap();
        let back = m.inverse_transform(&m.transform(&data).unwrap()).unwrap();
        assert!(back.max_abs_diff(&data) < 1e-8);
    }

    #[test]
    fn mean_maps_to_zero() {
        let data = grid(15, 4);
        let m = fit(&data, 3).unwrap();
        let mean = Tensor::new(vec![1, 4], m.mean.clone()).unwrap();
        assert!(m.transform(&mean).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn too_many_components_rejected() {
        assert!(matches!(fit(&grid(4, 6), 5), Err(Error::Domain(_))));
        assert!(matches!(fit(&grid(1, 6), 1), Err(Error::Domain(_))));
    }

    #[test]
    fn wrong_width_rejected() {
        let m = fit(&grid(6, 3), 2).unwrap();
        assert!(m.transform(&grid(2, 4)).is_err());
    }
}
