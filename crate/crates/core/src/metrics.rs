//! Cluster-quality statistics for embeddings with known labels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean silhouette coefficient over all points, Euclidean distance.
/// Points in singleton clusters score 0.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::dim("silhouette labels", n, labels.len()));
    }
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Domain("silhouette needs at least two non-empty clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    let mut sums = vec![0.0; clusters];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_clusters() {
        // Clusters {0, 1} and {4, 5} on a line.
        let p = Tensor::new(vec![4, 1], vec![0.0, 1.0, 4.0, 5.0]).unwrap();
        let s = silhouette(&p, &[0, 0, 1, 1]).unwrap();
        // a = 1; b = 4.5 for the outer points, 3.5 for the inner points.
        let want = ((1.0 - 1.0 / 4.5) + (1.0 - 1.0 / 3.5)) / 2.0;
        assert!((s - want).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_rejected() {
        let p = Tensor::zeros(&[3, 2]);
        assert!(silhouette(&p, &[0, 0, 0]).is_err());
    }
}
