//! The eight flips and quarter-turn rotations of a square image.
//!
//! Index `k` applies a horizontal flip when `k >= 4`, then `k % 4`
//! counter-clockwise quarter turns. Index 0 is the identity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIHEDRAL_ORDER: usize = 8;

fn square_side(image: &Tensor) -> Result<usize> {
    match *image.shape() {
        [h, w] if h == w => Ok(h),
        [h, w] => Err(Error::Domain(format!("augmentation needs a square image, got {h}x{w}"))),
        ref s => Err(Error::dim("augment", "[H, W]", format!("{s:?}"))),
    }
}

/// Maps an output pixel `(row, col)` to the source pixel it copies.
fn source(index: usize, n: usize, mut r: usize, mut c: usize) -> (usize, usize) {
    // Undo the rotations (last applied first), then the flip.
    for _ in 0..index % 4 {
        // out[i][j] = in[j][n-1-i]
        (r, c) = (c, n - 1 - r);
    }
    if index >= 4 {
        c = n - 1 - c;
    }
    (r, c)
}

fn apply_plane(src: &[f64], n: usize, index: usize, dst: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = source(index, n, r, c);
            dst[r * n + c] = src[sr * n + sc];
        }
    }
}

pub fn augment(image: &Tensor, index: usize) -> Result<Tensor> {
    let n = square_side(image)?;
    if index >= DIHEDRAL_ORDER {
        return Err(Error::Domain(format!("augmentation index {index} not in 0..8")));
    }
    let mut out = vec![0.0; n * n];
    apply_plane(image.data(), n, index, &mut out);
    Tensor::new(vec![n, n], out)
}

pub fn rot90(image: &Tensor) -> Result<Tensor> {
    augment(image, 1)
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    augment(image, 4)
}

/// Index of `augment(augment(x, first), second)`.
pub fn compose(first: usize, second: usize) -> usize {
    // A flip conjugates rotations to their inverses: R^a F = F R^-a.
    let (fa, ra) = (first / 4, first % 4);
    let (fb, rb) = (second / 4, second % 4);
    let (flip, rot) = if fb == 0 {
        (fa, ra + rb)
    } else {
        (1 - fa, (4 - ra) + rb)
    };
    flip * 4 + rot % 4
}

/// Augments every image of a `[B, 1, N, N]` batch in place.
pub fn augment_batch(batch: &mut Tensor, indices: &[usize]) -> Result<()> {
    let &[b, 1, h, w] = batch.shape() else {
        return Err(Error::dim("augment_batch", "[B, 1, N, N]", format!("{:?}", batch.shape())));
    };
    if h != w {
        return Err(Error::Domain(format!("augmentation needs square images, got {h}x{w}")));
    }
    if indices.len() != b {
        return Err(Error::dim("augmentation indices", b, indices.len()));
    }
    let mut scratch = vec![0.0; h * w];
    for (i, &k) in indices.iter().enumerate() {
        if k >= DIHEDRAL_ORDER {
            return Err(Error::Domain(format!("augmentation index {k} not in 0..8")));
        }
        if k == 0 {
            continue;
        }
        let row = batch.row_mut(i);
        apply_plane(row, h, k, &mut scratch);
        row.copy_from_slice(&scratch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Tensor {
        Tensor::from_fn(&[3, 3], |i| i as f64)
    }

    #[test]
    fn identity_and_flip() {
        assert_eq!(augment(&img(), 0).unwrap(), img());
        let two = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flip_horizontal(&two).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn rotation_has_order_four() {
        let mut x = img();
        for _ in 0..4 {
            x = rot90(&x).unwrap();
        }
        assert_eq!(x, img());
        assert_ne!(rot90(&img()).unwrap(), img());
    }

    #[test]
    fn orbit_has_eight_distinct_images() {
        let orbit: Vec<Tensor> = (0..8).map(|k| augment(&img(), k).unwrap()).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(orbit[a], orbit[b], "{a} vs {b}");
            }
        }
    }

    #[test]
    fn composition_closes() {
        for a in 0..8 {
            for b in 0..8 {
                let twice = augment(&augment(&img(), a).unwrap(), b).unwrap();
                assert_eq!(twice, augment(&img(), compose(a, b)).unwrap(), "{a} then {b}");
            }
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(augment(&Tensor::zeros(&[2, 3]), 1).is_err());
        assert!(augment(&img(), 8).is_err());
    }
}
