//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, SymmetricEigen};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Smallest eigenvalue above `rel_tol * max`, given ascending eigenvalues.
pub fn min_positive(eigs: &[f64], rel_tol: f64) -> Option<f64> {
    let max = eigs.last().copied()?;
    if max <= 0.0 {
        return None;
    }
    eigs.iter().copied().find(|&v| v > rel_tol * max)
}

/// Moore-Penrose pseudo-inverse through SVD, zeroing singular values below
/// `rel_tol * s_max`.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut s_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * s_max {
            s_inv[(k, k)] = 1.0 / s;
        }
    }
    vt.transpose() * s_inv * u.transpose()
}

/// Numerical rank: singular values above `rel_tol * s_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = m.singular_values();
    let s_max = s.iter().copied().fold(0.0, f64::max);
    s.iter().filter(|&&v| v > rel_tol * s_max).count()
}

/// Stable 64-bit FNV-1a, used for parameter digests in trace metadata.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
