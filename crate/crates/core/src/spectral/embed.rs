//! Horizontal diffusion maps (per point) and horizontal base diffusion maps
//! (per fibre), with their Euclidean distances.
//!
//! With eigenpairs `(λ_l, v_l)` and `v_{l[j]}` the segment of `v_l` on fibre
//! `j`, the point embedding is `(w_1^t v_1(p), …, w_{k-1}^t v_{k-1}(p))` and
//! the fibre feature vector holds `w_l^{t/2} w_m^{t/2} ⟨v_{l[j]}, v_{m[j]}⟩`
//! for all `l, m < k`. The weights `w` are the eigenvalues themselves in
//! [`SpectrumMode::LaplacianLiteral`] and `1 - λ` in [`SpectrumMode::Diffusion`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SpectralDecomposition;
use crate::error::{HdmError, Result};
use crate::sparse::BlockLayout;

const CLAMP_TOL: f64 = 1e-12;
const ORACLE_MAX: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMode {
    /// Weights are the eigenvalues of the decomposed operator.
    #[default]
    LaplacianLiteral,
    /// Weights are `1 - λ`, the eigenvalues of the normalized adjacency.
    Diffusion,
}

impl std::str::FromStr for SpectrumMode {
    type Err = HdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplacian-literal" => Ok(SpectrumMode::LaplacianLiteral),
            "diffusion" => Ok(SpectrumMode::Diffusion),
            other => Err(HdmError::invalid("spectrum", format!("unknown mode `{other}`"))),
        }
    }
}

/// Default number of retained pairs, `⌈√κ⌉`.
pub fn default_truncation(kappa: usize) -> usize {
    (kappa as f64).sqrt().ceil() as usize
}

fn is_integer(t: f64) -> bool {
    t.fract() == 0.0
}

/// Per-pair base weights for the first `k` pairs.
fn base_weights(decomp: &SpectralDecomposition, k: usize, mode: SpectrumMode) -> Result<Vec<f64>> {
    if k == 0 || k > decomp.len() {
        return Err(HdmError::invalid("k", format!("need 0 < k <= {}", decomp.len())));
    }
    decomp.values[..k]
        .iter()
        .map(|&lam| match mode {
            SpectrumMode::LaplacianLiteral => {
                if lam < -CLAMP_TOL {
                    Err(HdmError::NegativeEigenvalue(lam))
                } else {
                    Ok(lam.max(0.0))
                }
            }
            SpectrumMode::Diffusion => Ok(1.0 - lam),
        })
        .collect()
}

/// `w^p`, rejecting negative bases with non-integer exponents.
fn signed_pow(w: f64, p: f64) -> Result<f64> {
    if w >= 0.0 {
        Ok(w.powf(p))
    } else if is_integer(p) {
        Ok(w.powi(p as i32))
    } else {
        Err(HdmError::NegativeEigenvalue(w))
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(HdmError::invalid("t", "diffusion time must be positive"));
    }
    Ok(())
}

/// Per-point horizontal diffusion map coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HdmCoordinates {
    pub t: f64,
    /// Number of eigenpairs used, including the excluded first one.
    pub k: usize,
    pub layout: BlockLayout,
    /// One row of length `k - 1` per point.
    pub coords: Vec<Vec<f64>>,
}

impl Serialize for BlockLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.sizes().serialize(s)
    }
}

pub fn hdm_coords(
    decomp: &SpectralDecomposition,
    layout: &BlockLayout,
    t: f64,
    k: usize,
    mode: SpectrumMode,
) -> Result<HdmCoordinates> {
    check_t(t)?;
    if k < 2 {
        return Err(HdmError::invalid("k", "need at least two eigenpairs"));
    }
    if decomp.vectors.first().map(Vec::len) != Some(layout.total()) {
        return Err(HdmError::SizeMismatch(
            decomp.vectors.first().map_or(0, Vec::len),
            layout.total(),
        ));
    }
    let w = base_weights(decomp, k, mode)?;
    let scale: Vec<f64> = w[1..].iter().map(|&x| signed_pow(x, t)).collect::<Result<_>>()?;
    let coords = (0..layout.total())
        .map(|p| {
            scale
                .iter()
                .enumerate()
                .map(|(l, s)| s * decomp.vectors[l + 1][p])
                .collect()
        })
        .collect();
    Ok(HdmCoordinates {
        t,
        k,
        layout: layout.clone(),
        coords,
    })
}

/// Horizontal diffusion distance between points `p` and `q`.
pub fn hdd(coords: &HdmCoordinates, p: usize, q: usize) -> Result<f64> {
    let n = coords.coords.len();
    for idx in [p, q] {
        if idx >= n {
            return Err(HdmError::IndexOutOfRange { index: idx, len: n });
        }
    }
    Ok(coords.coords[p]
        .iter()
        .zip(&coords.coords[q])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Per-fibre horizontal base diffusion map features, `k²` entries each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HbdmFeatures {
    pub t: f64,
    pub k: usize,
    pub features: Vec<Vec<f64>>,
}

impl HbdmFeatures {
    pub fn inner(&self, i: usize, j: usize) -> f64 {
        self.features[i]
            .iter()
            .zip(&self.features[j])
            .map(|(a, b)| a * b)
            .sum()
    }

    fn check(&self, idx: usize) -> Result<()> {
        if idx >= self.features.len() {
            return Err(HdmError::IndexOutOfRange {
                index: idx,
                len: self.features.len(),
            });
        }
        Ok(())
    }
}

pub fn hbdm_features(
    decomp: &SpectralDecomposition,
    layout: &BlockLayout,
    t: f64,
    k: usize,
    mode: SpectrumMode,
) -> Result<HbdmFeatures> {
    check_t(t)?;
    if decomp.vectors.first().map(Vec::len) != Some(layout.total()) {
        return Err(HdmError::SizeMismatch(
            decomp.vectors.first().map_or(0, Vec::len),
            layout.total(),
        ));
    }
    let w = base_weights(decomp, k, mode)?;
    let half: Vec<f64> = w.iter().map(|&x| signed_pow(x, t / 2.0)).collect::<Result<_>>()?;
    let features = (0..layout.num_blocks())
        .map(|j| {
            let range = layout.range(j);
            let segs: Vec<&[f64]> = (0..k).map(|l| &decomp.vectors[l][range.clone()]).collect();
            let mut f = vec![0.0; k * k];
            for l in 0..k {
                for m in l..k {
                    let ip: f64 = segs[l].iter().zip(segs[m]).map(|(a, b)| a * b).sum();
                    let v = half[l] * half[m] * ip;
                    f[l * k + m] = v;
                    f[m * k + l] = v;
                }
            }
            f
        })
        .collect();
    Ok(HbdmFeatures { t, k, features })
}

/// Horizontal base diffusion distance, `|V^t(X_i) - V^t(X_j)|`.
pub fn hbdd(features: &HbdmFeatures, i: usize, j: usize) -> Result<f64> {
    features.check(i)?;
    features.check(j)?;
    Ok(features.features[i]
        .iter()
        .zip(&features.features[j])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// The same distance through inner products, `√(F_ii + F_jj - 2F_ij)`.
pub fn hbdd_expanded(features: &HbdmFeatures, i: usize, j: usize) -> Result<f64> {
    features.check(i)?;
    features.check(j)?;
    let v = features.inner(i, i) + features.inner(j, j) - 2.0 * features.inner(i, j);
    Ok(v.max(0.0).sqrt())
}

/// Frobenius norm of block `(i, j)` of the literal `t`-th power of a dense matrix.
pub fn block_power_frobenius(matrix: &DMatrix<f64>, layout: &BlockLayout, t: u32, i: usize, j: usize) -> Result<f64> {
    let n = matrix.nrows();
    if n > ORACLE_MAX {
        return Err(HdmError::ScaleTooLarge { max: ORACLE_MAX, got: n });
    }
    if matrix.ncols() != n || layout.total() != n {
        return Err(HdmError::SizeMismatch(n, layout.total()));
    }
    if t == 0 {
        return Err(HdmError::invalid("t", "power must be a positive integer"));
    }
    for idx in [i, j] {
        if idx >= layout.num_blocks() {
            return Err(HdmError::IndexOutOfRange {
                index: idx,
                len: layout.num_blocks(),
            });
        }
    }
    let mut power = matrix.clone();
    for _ in 1..t {
        power = &power * matrix;
    }
    let (ri, rj) = (layout.range(i), layout.range(j));
    Ok(power
        .view((ri.start, rj.start), (ri.len(), rj.len()))
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt())
}
