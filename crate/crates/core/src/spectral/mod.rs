//! Symmetric eigensolving and the spectral embeddings built on it.

mod embed;
mod lanczos;

pub use embed::{
    block_power_frobenius, default_truncation, hbdd, hbdd_expanded, hbdm_features, hdd, hdm_coords, HbdmFeatures, HdmCoordinates,
    SpectrumMode,
};
pub use lanczos::{eig_sym, EigOptions, Which};

use crate::sparse::CsrMatrix;

/// Eigenvalues (ascending) and eigenvectors (columns) of a dense symmetric
/// matrix; only the lower triangle is read.
pub fn symmetric_eigen(m: &nalgebra::DMatrix<f64>) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let n = m.nrows();
    let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = fm.selfadjoint_eigendecomposition(faer::Side::Lower);
    let (s, u) = (eig.s().column_vector(), eig.u());
    let values = (0..n).map(|i| s.read(i)).collect();
    (values, nalgebra::DMatrix::from_fn(n, n, |i, j| u.read(i, j)))
}

/// A symmetric linear map `x ↦ A x`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        CsrMatrix::dim(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

/// Matrix-free operator from a closure.
pub struct FnOperator<F: Fn(&[f64], &mut [f64]) + Sync> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

/// Eigenpairs in ascending eigenvalue order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectralDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// `|A v - λ v|` for each pair.
    pub residuals: Vec<f64>,
    /// Lower bound on `|A|` seen during the iteration.
    pub norm_estimate: f64,
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Full decomposition of a small dense symmetric matrix.
    pub fn from_dense(m: &nalgebra::DMatrix<f64>) -> Self {
        let (values, vectors) = symmetric_eigen(m);
        let mut out = SpectralDecomposition::default();
        for (i, &lam) in values.iter().enumerate() {
            let mut v: Vec<f64> = vectors.column(i).iter().copied().collect();
            lanczos::fix_sign(&mut v);
            let av = m * nalgebra::DVector::from_column_slice(&v);
            let r = av.iter().zip(&v).map(|(a, b)| (a - lam * b).powi(2)).sum::<f64>().sqrt();
            out.values.push(lam);
            out.vectors.push(v);
            out.residuals.push(r);
        }
        out.norm_estimate = out.values.iter().fold(0.0, |a, v| a.max(v.abs()));
        out
    }

    /// Largest `|⟨v_a, v_b⟩ - δ_ab|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.vectors.len() {
            for b in a..self.vectors.len() {
                let ip: f64 = self.vectors[a].iter().zip(&self.vectors[b]).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}
