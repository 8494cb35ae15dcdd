//! Tensor grids over boxes.

use alloc::vec::Vec;
use nalgebra::DVector;

use crate::error::ModelError;
use crate::model::BoxSet;

/// Coordinates of `n` evenly spaced points on `[lo, hi]` (a single point if `lo == hi`).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return alloc::vec![if n == 0 { lo } else { 0.5 * (lo + hi) }];
    }
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// Full tensor grid with `n` points per dimension; degenerate dimensions contribute one point.
pub fn uniform_points(b: &BoxSet, n: usize) -> Result<Vec<DVector<f64>>, ModelError> {
    if b.lower().iter().chain(b.upper().iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::Invalid("cannot grid an unbounded box".into()));
    }
    let axes: Vec<Vec<f64>> = (0..b.dim()).map(|i| linspace(b.lower()[i], b.upper()[i], n)).collect();
    Ok(tensor(&axes))
}

/// Cartesian product of per-axis coordinate lists; the first axis varies slowest.
pub fn tensor(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = alloc::vec![0usize; axes.len()];
    for _ in 0..total {
        out.push(DVector::from_iterator(axes.len(), idx.iter().zip(axes).map(|(&i, a)| a[i])));
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// The `2^n` vertices of a box (duplicates removed for degenerate dimensions).
pub fn corners(b: &BoxSet) -> Vec<DVector<f64>> {
    let axes: Vec<Vec<f64>> = (0..b.dim())
        .map(|i| {
            let (l, u) = (b.lower()[i], b.upper()[i]);
            if l == u {
                alloc::vec![l]
            } else {
                alloc::vec![l, u]
            }
        })
        .collect();
    tensor(&axes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_endpoints() {
        let b =
            BoxSet::new(DVector::from_vec(alloc::vec![0.0, 1.0, 2.0]), DVector::from_vec(alloc::vec![1.0, 1.0, 4.0]))
                .unwrap();
        let pts = uniform_points(&b, 3).unwrap();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().any(|p| p[0] == 1.0 && p[2] == 4.0));
        assert_eq!(corners(&b).len(), 4);
    }

    #[test]
    fn linspace_hits_both_ends() {
        let v = linspace(-1.0, 2.0, 4);
        assert_eq!(v, alloc::vec![-1.0, 0.0, 1.0, 2.0]);
    }
}
