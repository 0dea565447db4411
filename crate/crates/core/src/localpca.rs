//! Local PCA tangent-plane estimation and alignment of neighboring bases.
//!
//! For a point `x_j` with neighbors `x_i`, the columns `x_i - x_j` are weighted
//! by `sqrt(K(|x_i - x_j| / sqrt(eps_pca)))` and the leading `d` left singular
//! vectors of the weighted matrix form the basis `B_j`. Two bases are aligned
//! by the orthogonal polar factor of `B_jᵀ B_i`, which estimates the parallel
//! transport from the tangent plane at `x_i` to the one at `x_j`.

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HdmError, Result};
use crate::knn::KnnIndex;

const RANK_TOL: f64 = 1e-12;
const DEGENERATE_TOL: f64 = 1e-12;
const DEFAULT_GAMMA: f64 = 0.9;
/// Kernel argument at which the last required neighbour lands after widening.
const SUPPORT_WIDENING: f64 = 0.9;

/// Weight profile on `[0, 1]`, zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaKernel {
    /// `1 - u²`
    Epanechnikov,
    /// `exp(-5 u²)`
    Gaussian5,
}

impl PcaKernel {
    pub fn eval(&self, u: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        match self {
            PcaKernel::Epanechnikov => 1.0 - u * u,
            PcaKernel::Gaussian5 => (-5.0 * u * u).exp(),
        }
    }
}

impl Default for PcaKernel {
    fn default() -> Self {
        PcaKernel::Epanechnikov
    }
}

/// How the intrinsic dimension is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntrinsicDim {
    Fixed(usize),
    /// Median of per-point energy-threshold dimensions, see [`estimate_dimension`].
    Auto { gamma: f64 },
}

impl Default for IntrinsicDim {
    fn default() -> Self {
        IntrinsicDim::Auto {
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub base_index: usize,
    /// `D × d`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// All singular values of the weighted difference matrix, nonincreasing.
    pub singular_values: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Embeds intrinsic coordinates `c` into the ambient space as `B c`.
    pub fn embed(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for (k, ck) in c.iter().enumerate() {
            for (r, o) in out.iter_mut().enumerate() {
                *o += self.basis[(r, k)] * ck;
            }
        }
        out
    }
}

/// Estimated transport `O_ji` taking coordinates in `B_i` to coordinates in `B_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportEstimate {
    pub from: usize,
    pub to: usize,
    pub o: DMatrix<f64>,
    /// Smallest singular value of `B_jᵀ B_i`; below 1e-12 the minimizer is not unique.
    pub min_singular: f64,
}

impl TransportEstimate {
    pub fn is_degenerate(&self) -> bool {
        self.min_singular < DEGENERATE_TOL
    }

    /// Errors with [`HdmError::DegenerateOverlap`] when the alignment is not unique.
    pub fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            Err(HdmError::DegenerateOverlap(self.min_singular))
        } else {
            Ok(())
        }
    }

    /// `O_ji c`
    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        (0..self.o.nrows())
            .map(|r| (0..self.o.ncols()).map(|k| self.o[(r, k)] * c[k]).sum())
            .collect()
    }
}

/// Singular value decomposition with columns reordered so singular values are nonincreasing.
pub(crate) fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = SVD::new(m, true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let s: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), idx.len(), |r, c| u[(r, idx[c])]);
    let vt = DMatrix::from_fn(idx.len(), vt.ncols(), |r, c| vt[(idx[r], c)]);
    (u, s, vt)
}

/// Weighted difference matrix `X_j D_j` and its singular values for each point.
fn weighted_svds<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    eps_pca: f64,
    kernel: PcaKernel,
    min_support: usize,
) -> Vec<(DMatrix<f64>, Vec<f64>)> {
    let index = KnnIndex::new(points);
    (0..points.len())
        .into_par_iter()
        .map(|j| {
            let xj = points[j].as_ref();
            let dim = xj.len();
            let nbrs = index.query(xj, k, Some(j));
            // Where the kernel support holds too few neighbours, widen it just
            // enough to reach the `min_support`-th one.
            let mut scale = eps_pca.sqrt();
            if let Some(far) = nbrs.get(min_support.min(nbrs.len()).saturating_sub(1)) {
                scale = scale.max(far.dist2.sqrt() / SUPPORT_WIDENING);
            }
            let mut m = DMatrix::zeros(dim, nbrs.len());
            for (c, n) in nbrs.iter().enumerate() {
                let w = kernel.eval(n.dist2.sqrt() / scale).sqrt();
                let xi = points[n.index].as_ref();
                for r in 0..dim {
                    m[(r, c)] = w * (xi[r] - xj[r]);
                }
            }
            let (u, s, _) = sorted_svd(m);
            (u, s)
        })
        .collect()
}

/// Tangent-plane bases at every point of a cloud.
///
/// At a point whose `√ε_PCA` ball holds fewer than `d` neighbours (three in
/// auto mode) the kernel support is widened locally to reach them.
pub fn local_pca_bases<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    eps_pca: f64,
    kernel: PcaKernel,
    dim: IntrinsicDim,
) -> Result<Vec<PcaBasis>> {
    if !(eps_pca > 0.0) {
        return Err(HdmError::invalid("eps_pca", "must be positive"));
    }
    let needed = match dim {
        IntrinsicDim::Fixed(d) => d + 1,
        IntrinsicDim::Auto { .. } => 2,
    };
    if k < needed || k >= points.len() {
        return Err(HdmError::NeighborCountTooSmall { k, needed });
    }
    let min_support = match dim {
        IntrinsicDim::Fixed(d) => d,
        IntrinsicDim::Auto { .. } => 3,
    };
    let svds = weighted_svds(points, k, eps_pca, kernel, min_support);
    let d = match dim {
        IntrinsicDim::Fixed(d) => d,
        IntrinsicDim::Auto { gamma } => {
            let svs: Vec<Vec<f64>> = svds.iter().map(|(_, s)| s.clone()).collect();
            estimate_dimension(&svs, gamma)?
        }
    };
    svds.into_iter()
        .enumerate()
        .map(|(j, (u, s))| {
            let top = s.first().copied().unwrap_or(0.0);
            let rank = s.iter().filter(|&&v| v > RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
            if top <= 0.0 || rank < d || u.ncols() < d {
                return Err(HdmError::PcaRankDeficient {
                    index: j,
                    rank: if top <= 0.0 { 0 } else { rank },
                    needed: d,
                });
            }
            Ok(PcaBasis {
                base_index: j,
                basis: u.columns(0, d).into_owned(),
                singular_values: s,
            })
        })
        .collect()
}

/// Median (lower on ties) of the per-point dimensions reaching energy fraction `gamma`.
pub fn estimate_dimension(singular_values: &[Vec<f64>], gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(HdmError::invalid("gamma", "must lie in (0, 1)"));
    }
    let mut dims: Vec<usize> = singular_values
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let total: f64 = s.iter().map(|v| v * v).sum();
            if total <= 0.0 {
                return 0;
            }
            let mut acc = 0.0;
            for (m, v) in s.iter().enumerate() {
                acc += v * v;
                if acc / total >= gamma {
                    return m + 1;
                }
            }
            s.len()
        })
        .collect();
    if dims.is_empty() {
        return Err(HdmError::EmptyInput);
    }
    dims.sort_unstable();
    Ok(dims[(dims.len() - 1) / 2])
}

/// Orthogonal Procrustes alignment `O_ji = argmin_{O ∈ O(d)} |O - B_jᵀ B_i|`.
pub fn align_bases(bi: &PcaBasis, bj: &PcaBasis) -> Result<TransportEstimate> {
    if bi.dim() != bj.dim() || bi.ambient_dim() != bj.ambient_dim() {
        return Err(HdmError::DimensionMismatch {
            expected: bi.dim(),
            got: bj.dim(),
        });
    }
    let overlap = bj.basis.transpose() * &bi.basis;
    let (o, min_singular) = polar_factor(overlap);
    Ok(TransportEstimate {
        from: bi.base_index,
        to: bj.base_index,
        o,
        min_singular,
    })
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix and its smallest singular value.
pub fn polar_factor(m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (u, s, vt) = sorted_svd(m);
    let min = s.last().copied().unwrap_or(0.0);
    (u * vt, min)
}

/// Estimated transports for every listed pair `(i, j)`, in both directions.
pub fn align_pairs(bases: &[PcaBasis], pairs: &[(usize, usize)]) -> Result<Vec<TransportEstimate>> {
    pairs
        .par_iter()
        .map(|&(i, j)| align_bases(&bases[i], &bases[j]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{frame_s2, uniform_sphere_sample};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn basis(cols: &[&[f64]]) -> PcaBasis {
        let d = cols.len();
        let n = cols[0].len();
        PcaBasis {
            base_index: 0,
            basis: DMatrix::from_fn(n, d, |r, c| cols[c][r]),
            singular_values: vec![1.0; d],
        }
    }

    fn orthonormality_defect(b: &DMatrix<f64>) -> f64 {
        let g = b.transpose() * b;
        (g - DMatrix::identity(b.ncols(), b.ncols())).amax()
    }

    /// Largest principal angle between span(B) and the plane orthogonal to `normal`.
    fn plane_angle(b: &DMatrix<f64>, normal: &[f64]) -> f64 {
        // sin of the largest principal angle equals the largest |⟨b_k, n⟩| over unit b in span(B)
        let proj: Vec<f64> = (0..b.ncols())
            .map(|c| (0..b.nrows()).map(|r| b[(r, c)] * normal[r]).sum())
            .collect();
        proj.iter().map(|p| p * p).sum::<f64>().sqrt().min(1.0).asin()
    }

    #[test]
    fn planar_cloud_recovers_plane() {
        let mut rng = rng_from_seed(4);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let bases = local_pca_bases(&pts, 15, 0.1, PcaKernel::Epanechnikov, IntrinsicDim::Fixed(2)).unwrap();
        for b in &bases {
            assert!(plane_angle(&b.basis, &[0.0, 0.0, 1.0]) < 1e-8);
            assert!(orthonormality_defect(&b.basis) < 1e-10);
            assert!(b.singular_values[2] < 1e-12);
        }
        let auto = local_pca_bases(&pts, 15, 0.1, PcaKernel::Epanechnikov, IntrinsicDim::default()).unwrap();
        assert_eq!(auto[0].dim(), 2);
    }

    #[test]
    fn sphere_cloud_tangent_planes() {
        let n = 2000;
        let pts: Vec<Vec<f64>> = uniform_sphere_sample(3, n, 9)
            .unwrap()
            .into_iter()
            .map(|p| p.into_inner())
            .collect();
        let eps = (n as f64).powf(-0.5);
        let bases = local_pca_bases(&pts, 60, eps, PcaKernel::Epanechnikov, IntrinsicDim::Fixed(2)).unwrap();
        let mut angles: Vec<f64> = bases.iter().zip(&pts).map(|(b, p)| plane_angle(&b.basis, p)).collect();
        angles.sort_by(f64::total_cmp);
        assert!(angles[angles.len() / 2] < 0.1, "median angle {}", angles[angles.len() / 2]);
        assert!(bases.iter().all(|b| orthonormality_defect(&b.basis) < 1e-10));
    }

    #[test]
    fn isolated_point_widens_support() {
        let mut pts: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![(i % 10) as f64 * 0.01, (i / 10) as f64 * 0.01, 0.0])
            .collect();
        pts.push(vec![1.0, 1.0, 0.0]);
        let bases = local_pca_bases(&pts, 8, 1e-3, PcaKernel::Epanechnikov, IntrinsicDim::Fixed(2)).unwrap();
        let far = &bases[100];
        assert!(far.basis[(2, 0)].abs() < 1e-12 && far.basis[(2, 1)].abs() < 1e-12);
        assert!(orthonormality_defect(&far.basis) < 1e-12);
    }

    #[test]
    fn rank_deficiency_reported() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.01, 0.0, 0.0]).collect();
        let err = local_pca_bases(&pts, 4, 1.0, PcaKernel::Epanechnikov, IntrinsicDim::Fixed(2)).unwrap_err();
        assert!(matches!(err, HdmError::PcaRankDeficient { rank: 1, needed: 2, .. }));
        let err = local_pca_bases(&pts, 2, 1.0, PcaKernel::Epanechnikov, IntrinsicDim::Fixed(2)).unwrap_err();
        assert!(matches!(err, HdmError::NeighborCountTooSmall { .. }));
    }

    #[test]
    fn dimension_estimates() {
        assert_eq!(estimate_dimension(&[vec![1.0, 1.0, 1.0]], 0.99).unwrap(), 3);
        assert_eq!(estimate_dimension(&[vec![1.0, 0.0, 0.0]], 0.5).unwrap(), 1);
        assert_eq!(estimate_dimension(&[vec![1.0, 0.0, 0.0]], 0.999).unwrap(), 1);
        assert_eq!(estimate_dimension(&[vec![1.0, 0.9, 1e-12]], 0.9).unwrap(), 2);
        // lower median of (1, 2, 2, 3) is 2; of (1, 3) is 1
        let lists = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(estimate_dimension(&lists, 0.99).unwrap(), 2);
        assert_eq!(estimate_dimension(&[vec![1.0, 0.0], vec![1.0, 1.0, 1.0]], 0.99).unwrap(), 1);
        assert_eq!(estimate_dimension(&[vec![]], 0.9).unwrap_err(), HdmError::EmptyInput);
    }

    #[test]
    fn self_alignment_is_identity() {
        let b = basis(&[&[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8]]);
        let t = align_bases(&b, &b).unwrap();
        assert!((t.o.clone() - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(!t.is_degenerate());
    }

    #[test]
    fn orthogonal_overlap_returned_unchanged() {
        let (s, c) = 0.3f64.sin_cos();
        let bi = basis(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let bj = basis(&[&[c, s, 0.0], &[-s, c, 0.0]]);
        let overlap = bj.basis.transpose() * &bi.basis;
        let t = align_bases(&bi, &bj).unwrap();
        assert!((t.o - overlap).amax() < 1e-12);
    }

    #[test]
    fn polar_of_diagonal_is_identity() {
        let (o, min) = polar_factor(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]));
        assert!((o - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((min - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_overlap_flagged() {
        let bi = basis(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let bj = basis(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let t = align_bases(&bi, &bj).unwrap();
        assert!(t.is_degenerate());
        assert!(matches!(t.check(), Err(HdmError::DegenerateOverlap(_))));
        let o = &t.o;
        assert!(((o.transpose() * o) - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert_eq!(t, align_bases(&bi, &bj).unwrap());
    }

    #[test]
    fn reverse_alignment_is_transpose() {
        let mut rng = rng_from_seed(12);
        for _ in 0..20 {
            let a = crate::geometry::sample_sphere_point(3, &mut rng);
            let b = crate::geometry::sample_sphere_point(3, &mut rng);
            let p = [a[0], a[1], a[2]];
            let q = [b[0], b[1], b[2]];
            let (e1, e2) = frame_s2(&p);
            let (f1, f2) = frame_s2(&q);
            let bi = basis(&[&e1, &e2]);
            let bj = basis(&[&f1, &f2]);
            let fwd = align_bases(&bi, &bj).unwrap();
            let bwd = align_bases(&bj, &bi).unwrap();
            assert!((fwd.o.transpose() - bwd.o).amax() < 1e-10);
            let g = fwd.o.transpose() * &fwd.o;
            assert!((g - DMatrix::identity(2, 2)).amax() < 1e-10);
        }
    }
}
