//! Small dense helpers shared by the solvers.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;

/// Symmetric part `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Replaces every eigenvalue of the symmetric matrix `m` below `floor` by `floor`.
pub fn eigenvalue_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks equally sized vectors into one column.
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend(p.iter().copied());
    }
    DVector::from_vec(data)
}

/// Splits a stacked vector into `len`-sized chunks.
pub fn unstack(v: &DVector<f64>, len: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(len).map(DVector::from_column_slice).collect()
}

/// `sqrt` of a positive definite matrix via its eigen-decomposition, returned
/// with the inverse square root.
pub fn sqrt_and_inv_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let v = &eig.eigenvectors;
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let si = eig.eigenvalues.map(|l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    (v * DMatrix::from_diagonal(&s) * v.transpose(), v * DMatrix::from_diagonal(&si) * v.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalue_floor_lifts_singular_directions() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1e-12, 8e-3]));
        let r = eigenvalue_floor(&q, 1e-8);
        assert!((r[(0, 0)] - 1e-8).abs() < 1e-20);
        assert!((r[(1, 1)] - 8e-3).abs() < 1e-15);
    }

    #[test]
    fn stack_unstack_inverse() {
        let parts = alloc::vec![DVector::from_vec(alloc::vec![1.0, 2.0]), DVector::from_vec(alloc::vec![3.0, 4.0])];
        let s = stack(&parts);
        assert_eq!(unstack(&s, 2), parts);
    }
}
