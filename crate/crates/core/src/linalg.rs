//! Small dense symmetric-matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, SymmetricEigen};

pub type Mat = DMatrix<f64>;

/// Largest dimension handled by the eigenvalue margins.
pub const MAX_DIM: usize = 8;

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let s = symmetrize(m);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    *sym_eigenvalues(m).last().expect("nonempty matrix")
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &Mat) -> bool {
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
