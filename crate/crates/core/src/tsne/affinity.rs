//! Input and output similarities, perplexity calibration, and the KL
//! objective with its gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to output similarities inside the logarithm.
pub const Q_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityKind {
    /// Each row is a distribution over the other points.
    Conditional,
    /// The whole matrix is one distribution.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub p: Tensor,
    pub kind: AffinityKind,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p.data()[i * self.len() + j]
    }

    pub fn total(&self) -> f64 {
        self.p.data().iter().sum()
    }

    /// Largest `|p_ij - p_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// How output similarities are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QNormalization {
    /// Each row divided by its own sum over `k != i`.
    #[default]
    PerRow,
    /// All entries divided by the sum over all pairs.
    Global,
}

/// `exp(-beta d)` normalized over the row, shifted by the minimum distance
/// for stability. Returns the row and its entropy (nats).
fn gaussian_row(distances: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = distances.iter().map(|&d| (-beta * (d - dmin)).exp()).collect();
    let total: f64 = row.iter().sum();
    let mut weighted = 0.0;
    for (p, &d) in row.iter_mut().zip(distances) {
        *p /= total;
        if *p > 0.0 {
            weighted += *p * (d - dmin);
        }
    }
    // H = beta * E[d - dmin] + log(total)
    (row, beta * weighted + total.ln())
}

fn check_row(distances: &[f64], row: usize) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::Domain("affinity row has no neighbours".into()));
    }
    if distances.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::Domain(format!("row {row}: distances must be >= 0")));
    }
    if distances.iter().all(|d| d.is_infinite()) {
        return Err(Error::DegenerateRow(row));
    }
    Ok(())
}

/// Gaussian similarities of one point to its neighbours (self excluded) for
/// bandwidth `alpha`.
pub fn conditional_affinities(distances: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_row(distances, 0)?;
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(gaussian_row(distances, 1.0 / (2.0 * alpha * alpha)).0)
}

pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub alpha: f64,
    /// `1 / (2 alpha^2)`; zero when the row is uniform.
    pub beta: f64,
    pub perplexity: f64,
}

/// Finds the bandwidth whose row perplexity matches `target` by bisection
/// on `beta = 1 / (2 alpha^2)`, doubling the upper end until it brackets.
pub fn calibrate_alpha(distances: &[f64], target: f64, tolerance: f64, max_iterations: usize) -> Result<Calibration> {
    calibrate_row(0, distances, target, tolerance, max_iterations).map(|(c, _)| c)
}

pub(crate) fn calibrate_row(
    row: usize,
    distances: &[f64],
    target: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Calibration, Vec<f64>)> {
    check_row(distances, row)?;
    let count = distances.iter().filter(|d| d.is_finite()).count();
    if !(target > 1.0 && target <= count as f64) {
        return Err(Error::Calibration {
            row,
            reason: format!("target perplexity {target} outside (1, {count}]"),
        });
    }
    let finite: Vec<f64> = distances.iter().copied().filter(|d| d.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let dmin = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = mean - dmin;
    let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..max_iterations {
        let (p, h) = gaussian_row(distances, beta);
        let perp = h.exp();
        let err = (perp - target).abs();
        if best.as_ref().is_none_or(|b| err < (b.1 - target).abs()) {
            best = Some((beta, perp, p.clone()));
        }
        if err <= tolerance {
            return Ok((make(beta, perp), p));
        }
        if perp > target {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * beta };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
        if hi.is_finite() && hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    match best {
        // Bracket collapsed at machine precision: accept the closest value
        // when it is within rounding of the target.
        Some((b, perp, p)) if hi.is_finite() && (perp - target).abs() <= tolerance.max(1e-9 * target) => {
            Ok((make(b, perp), p))
        }
        Some((_, perp, _)) => Err(Error::Calibration {
            row,
            reason: format!(
                "no bandwidth reaches perplexity {target} within {tolerance} after {max_iterations} steps (closest {perp})"
            ),
        }),
        None => Err(Error::Calibration {
            row,
            reason: "no iterations allowed".into(),
        }),
    }
}

fn make(beta: f64, perplexity: f64) -> Calibration {
    Calibration {
        alpha: (1.0 / (2.0 * beta)).sqrt(),
        beta,
        perplexity,
    }
}

/// Calibrated conditional matrix from an `N x N` squared-distance matrix;
/// row `i` is the distribution of point `i` over its neighbours.
pub fn conditional_matrix(
    distances: &Tensor,
    perplexity: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(AffinityMatrix, Vec<Calibration>)> {
    let n = distances.rows();
    distances.expect_shape("distance matrix", &[n, n])?;
    let rows: Vec<(Calibration, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| distances.data()[i * n + j]).collect();
            calibrate_row(i, &others, perplexity, tolerance, max_iterations)
        })
        .collect::<Result<_>>()?;
    let mut p = vec![0.0; n * n];
    let mut cals = Vec::with_capacity(n);
    for (i, (cal, row)) in rows.into_iter().enumerate() {
        let mut it = row.into_iter();
        for j in (0..n).filter(|&j| j != i) {
            p[i * n + j] = it.next().expect("n - 1 entries");
        }
        cals.push(cal);
    }
    Ok((
        AffinityMatrix {
            p: Tensor::new(vec![n, n], p)?,
            kind: AffinityKind::Conditional,
        },
        cals,
    ))
}

/// `p_ij = (p_{i|j} + p_{j|i}) / 2N`.
pub fn symmetrize(conditional: &AffinityMatrix) -> Result<AffinityMatrix> {
    if conditional.kind != AffinityKind::Conditional {
        return Err(Error::Domain("symmetrize expects a conditional matrix".into()));
    }
    let n = conditional.len();
    let scale = 1.0 / (2.0 * n as f64);
    let p = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        (conditional.get(i, j) + conditional.get(j, i)) * scale
    });
    Ok(AffinityMatrix {
        p,
        kind: AffinityKind::Joint,
    })
}

/// Student-t kernel values `(1 + |y_i - y_j|^2)^-1` with a zero diagonal.
pub(crate) fn student_t(y: &Tensor) -> Vec<f64> {
    let n = y.rows();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let yi = y.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let d: f64 = yi.iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                *v = 1.0 / (1.0 + d);
            }
        }
    });
    num
}

/// Output similarities: per-row normalization gives a conditional matrix,
/// global normalization a joint one.
pub fn q_affinities(y: &Tensor, variant: QNormalization) -> Result<AffinityMatrix> {
    if y.ndim() != 2 || y.rows() < 2 {
        return Err(Error::dim("embedding", "[N >= 2, v]", format!("{:?}", y.shape())));
    }
    let n = y.rows();
    let mut q = student_t(y);
    let kind = match variant {
        QNormalization::PerRow => {
            for row in q.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            AffinityKind::Conditional
        }
        QNormalization::Global => {
            let s: f64 = q.chunks(n).map(|r| r.iter().sum::<f64>()).sum();
            q.iter_mut().for_each(|v| *v /= s);
            AffinityKind::Joint
        }
    };
    Ok(AffinityMatrix {
        p: Tensor::new(vec![n, n], q)?,
        kind,
    })
}

/// `sum p_ij log(p_ij / q_ij)` over `i != j` with `p` joint. A conditional
/// `q` (rows summing to one) is divided by `N` first so both sides have unit
/// mass.
pub fn kl_divergence(p: &AffinityMatrix, q: &AffinityMatrix) -> Result<f64> {
    q.p.expect_shape("kl q", p.p.shape())?;
    if p.kind != AffinityKind::Joint {
        return Err(Error::Domain("kl_divergence expects a joint P".into()));
    }
    let n = p.len();
    let q_scale = match q.kind {
        AffinityKind::Joint => 1.0,
        AffinityKind::Conditional => 1.0 / n as f64,
    };
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                let pij = p.get(i, j);
                if i != j && pij > 0.0 {
                    s += pij * (pij / (q.get(i, j) * q_scale).max(Q_FLOOR)).ln();
                }
            }
            s
        })
        .collect();
    Ok(rows.iter().sum())
}

/// Gradient of `KL(P || Q(y))` with respect to `y`.
///
/// With `n_ij = (1 + |y_i - y_j|^2)^-1` both variants share the form
/// `grad_a = 2 sum_j (c_aj + c_ja) n_aj (y_a - y_j)`, where
/// `c_ij = p_ij - m_i q_ij` and `m_i` is the row mass of `P` (per-row) or
/// its total mass (global).
pub fn tsne_gradient(p: &AffinityMatrix, y: &Tensor, variant: QNormalization) -> Result<Tensor> {
    let n = p.len();
    if y.ndim() != 2 || y.rows() != n {
        return Err(Error::dim("embedding", format!("[{n}, v]"), format!("{:?}", y.shape())));
    }
    Ok(gradient_inner(p.p.data(), y, variant, &student_t(y)))
}

pub(crate) fn gradient_inner(p: &[f64], y: &Tensor, variant: QNormalization, num: &[f64]) -> Tensor {
    let n = y.rows();
    let v = y.row_len();
    let row_sums: Vec<f64> = num.chunks(n).map(|r| r.iter().sum()).collect();
    let p_rows: Vec<f64> = p.chunks(n).map(|r| r.iter().sum()).collect();
    let (q_den, mass): (Vec<f64>, Vec<f64>) = match variant {
        QNormalization::PerRow => (row_sums, p_rows),
        QNormalization::Global => {
            let s: f64 = row_sums.iter().sum();
            let m: f64 = p_rows.iter().sum();
            (vec![s; n], vec![m; n])
        }
    };
    let mut c = vec![0.0; n * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let scale = mass[i] / q_den[i];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = p[i * n + j] - scale * num[i * n + j];
        }
    });
    let mut grad = vec![0.0; n * v];
    grad.par_chunks_mut(v).enumerate().for_each(|(a, g)| {
        let ya = y.row(a);
        for j in 0..n {
            if j == a {
                continue;
            }
            let w = 2.0 * (c[a * n + j] + c[j * n + a]) * num[a * n + j];
            for (gk, (ak, jk)) in g.iter_mut().zip(ya.iter().zip(y.row(j))) {
                *gk += w * (ak - jk);
            }
        }
    });
    Tensor::new(vec![n, v], grad).expect("n x v")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_distances_split_evenly() {
        for alpha in [0.1, 1.0, 30.0] {
            let p = conditional_affinities(&[2.0, 2.0], alpha).unwrap();
            assert_eq!(p, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn two_alpha_squared_gives_e_inverse() {
        let alpha = 0.7;
        let p = conditional_affinities(&[0.0, 2.0 * alpha * alpha], alpha).unwrap();
        let e = (-1.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn wide_bandwidth_is_uniform() {
        let p = conditional_affinities(&[0.1, 1.0, 5.0], 1e8).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn infinite_row_is_degenerate() {
        let err = conditional_affinities(&[f64::INFINITY; 3], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow(_)));
    }

    #[test]
    fn uniform_target_is_count() {
        let c = calibrate_alpha(&[1.0, 1.0, 1.0], 3.0, 1e-10, 200).unwrap();
        assert!((c.perplexity - 3.0).abs() < 1e-10);
        let c = calibrate_alpha(&[1.0, 2.0, 4.0, 8.0], 4.0, 1e-8, 200).unwrap();
        assert!((c.perplexity - 4.0).abs() < 1e-8);
    }

    #[test]
    fn unreachable_target_fails_with_row() {
        // Two tied nearest neighbours: perplexity never drops below 2.
        let err = calibrate_row(7, &[1.0, 1.0, 5.0], 1.5, 1e-10, 100).unwrap_err();
        assert!(matches!(err, Error::Calibration { row: 7, .. }), "{err}");
    }

    #[test]
    fn two_point_symmetrization() {
        let cond = AffinityMatrix {
            p: Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            kind: AffinityKind::Conditional,
        };
        let j = symmetrize(&cond).unwrap();
        assert_eq!(j.p.data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn two_point_q_is_one() {
        let y = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, -1.0]).unwrap();
        let q = q_affinities(&y, QNormalization::PerRow).unwrap();
        assert_eq!(q.get(0, 1), 1.0);
        assert_eq!(q.get(1, 0), 1.0);
    }

    #[test]
    fn kl_examples() {
        let p = AffinityMatrix {
            p: Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
            kind: AffinityKind::Joint,
        };
        let q = AffinityMatrix {
            p: Tensor::new(vec![2, 2], vec![0.0, 0.5, 0.5, 0.0]).unwrap(),
            kind: AffinityKind::Joint,
        };
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
    }
}
