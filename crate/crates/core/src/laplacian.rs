//! Degree normalization and the graph horizontal Laplacians
//! `L = D - W`, `L_rw = I - D⁻¹W` and `L_* = I - D^{-1/2} W D^{-1/2}`.

use serde::Serialize;

use crate::error::{HdmError, Result};
use crate::kernels::HorizontalDiffusionMatrix;
use crate::sparse::CsrMatrix;

/// `W_α = D^{-α} W D^{-α}` with degrees taken from `W`.
pub fn alpha_normalize(w: &HorizontalDiffusionMatrix, alpha: f64) -> Result<HorizontalDiffusionMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HdmError::invalid("alpha", "must lie in [0, 1]"));
    }
    let deg = w.matrix.row_sums();
    if let Some(p) = deg.iter().position(|&d| !(d > 0.0)) {
        return Err(HdmError::ZeroDegreeVertex(p));
    }
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    let scale: Vec<f64> = deg.iter().map(|d| d.powf(-alpha)).collect();
    Ok(HorizontalDiffusionMatrix {
        layout: w.layout.clone(),
        matrix: w.matrix.map_entries(|i, j, v| v * (scale[i] * scale[j])),
        base_edges: w.base_edges.clone(),
    })
}

/// Degrees of `W_α` and the three Laplacian variants built on it.
#[derive(Debug, Clone)]
pub struct LaplacianBundle {
    pub alpha: f64,
    pub degrees: Vec<f64>,
    /// `W_α`
    pub w: CsrMatrix,
    inv_sqrt_deg: Vec<f64>,
}

/// Results of checking a [`LaplacianBundle`] against its structural identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplacianChecks {
    /// `max_i |Σ_j L_ij| / Σ_j |L_ij|`
    pub row_sum_defect: f64,
    pub symmetry_defect: f64,
    /// `max |L_* - D^{1/2} L_rw D^{-1/2}|` over stored entries.
    pub similarity_defect: f64,
    /// `|L_rw 𝟙|_∞`
    pub constant_kernel_defect: f64,
}

impl LaplacianBundle {
    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    /// `L^H = D - W_α`
    pub fn unnormalized(&self) -> CsrMatrix {
        self.with_diagonal(|_, _, v| -v, |i| self.degrees[i])
    }

    /// `L_rw = I - D⁻¹ W_α`
    pub fn random_walk(&self) -> CsrMatrix {
        let d = &self.degrees;
        self.with_diagonal(|i, _, v| -v / d[i], |_| 1.0)
    }

    /// `L_* = I - D^{-1/2} W_α D^{-1/2}`
    pub fn symmetric(&self) -> CsrMatrix {
        let s = &self.inv_sqrt_deg;
        self.with_diagonal(|i, j, v| -v * (s[i] * s[j]), |_| 1.0)
    }

    /// `D^{-1/2} W_α D^{-1/2}`, whose eigenvalues are `1 - λ(L_*)`.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let s = &self.inv_sqrt_deg;
        self.w.map_entries(|i, j, v| v * (s[i] * s[j]))
    }

    /// `D^{1/2} 𝟙`, the null vector of `L_*`, normalized.
    pub fn null_vector(&self) -> Vec<f64> {
        let total: f64 = self.degrees.iter().sum();
        self.degrees.iter().map(|d| (d / total).sqrt()).collect()
    }

    pub fn inv_sqrt_degrees(&self) -> &[f64] {
        &self.inv_sqrt_deg
    }

    fn with_diagonal(&self, off: impl Fn(usize, usize, f64) -> f64 + Sync, diag: impl Fn(usize) -> f64) -> CsrMatrix {
        let n = self.dim();
        let rows = (0..n)
            .map(|i| {
                let mut r: Vec<(u32, f64)> = self.w.row(i).map(|(j, v)| (j as u32, off(i, j, v))).collect();
                r.push((i as u32, diag(i)));
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    pub fn checks(&self) -> LaplacianChecks {
        let l = self.unnormalized();
        let row_sum_defect = l
            .row_sums()
            .iter()
            .zip(l.row_abs_sums())
            .map(|(s, a)| if a > 0.0 { s.abs() / a } else { 0.0 })
            .fold(0.0, f64::max);
        let lrw = self.random_walk();
        let lsym = self.symmetric();
        let sqrt_d: Vec<f64> = self.degrees.iter().map(|d| d.sqrt()).collect();
        let mut similarity_defect: f64 = 0.0;
        for (i, j, v) in lsym.triplets() {
            let via_rw = sqrt_d[i] * lrw.get(i, j) * self.inv_sqrt_deg[j];
            similarity_defect = similarity_defect.max((v - via_rw).abs());
        }
        let mut y = vec![0.0; self.dim()];
        lrw.matvec(&vec![1.0; self.dim()], &mut y);
        LaplacianChecks {
            row_sum_defect,
            symmetry_defect: l.symmetry_defect().max(lsym.symmetry_defect()),
            similarity_defect,
            constant_kernel_defect: y.iter().map(|v| v.abs()).fold(0.0, f64::max),
        }
    }
}

/// Builds the Laplacian bundle of an (already α-normalized) `W_α`.
pub fn horizontal_laplacians(w_alpha: &HorizontalDiffusionMatrix, alpha: f64) -> Result<LaplacianBundle> {
    let degrees = w_alpha.matrix.row_sums();
    if let Some(p) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(HdmError::ZeroDegreeVertex(p));
    }
    w_alpha.ensure_connected()?;
    let inv_sqrt_deg = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(LaplacianBundle {
        alpha,
        degrees,
        w: w_alpha.matrix.clone(),
        inv_sqrt_deg,
    })
}

/// `α`-normalization followed by [`horizontal_laplacians`].
pub fn laplacians_from_w(w: &HorizontalDiffusionMatrix, alpha: f64) -> Result<LaplacianBundle> {
    horizontal_laplacians(&alpha_normalize(w, alpha)?, alpha)
}
