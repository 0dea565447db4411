//! Fibre-bundle samples on the unit tangent bundle of S².
//!
//! Sampling is two-step: base points `ξ_j` first, then `N_F` points on the
//! fibre over each base point. Each fibre draws from its own RNG stream
//! derived from the config seed, so output does not depend on thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HdmError, Result};
use crate::geometry::{dot, frame_s2, norm, sample_sphere_point, Vec3};
use crate::localpca::{local_pca_bases, IntrinsicDim, PcaBasis, PcaKernel};
use crate::rng::stream_rng;

/// RNG stream reserved for base points; fibre `j` uses stream `j`.
const BASE_STREAM: u64 = u64::MAX;

/// One data object: an optional base point and its fibre points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fibre {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
}

/// The full dataset: fibres in order with global offsets `s_j = Σ_{p<j} κ_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FibreBundleSample {
    fibres: Vec<Fibre>,
    offsets: Vec<usize>,
    total: usize,
}

impl FibreBundleSample {
    pub fn new(fibres: Vec<Fibre>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(fibres.len());
        let mut total = 0;
        for (j, f) in fibres.iter().enumerate() {
            if f.points.is_empty() {
                return Err(HdmError::invalid("fibres", format!("fibre {j} has no points")));
            }
            offsets.push(total);
            total += f.points.len();
        }
        Ok(FibreBundleSample {
            fibres,
            offsets,
            total,
        })
    }

    pub fn fibres(&self) -> &[Fibre] {
        &self.fibres
    }

    pub fn num_fibres(&self) -> usize {
        self.fibres.len()
    }

    /// Global index of the first point of each fibre.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fibres.iter().map(|f| f.points.len()).collect()
    }

    /// Total number of points κ.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn global_index(&self, fibre: usize, point: usize) -> usize {
        self.offsets[fibre] + point
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        if global >= self.total {
            return None;
        }
        let j = self.offsets.partition_point(|&o| o <= global) - 1;
        Some((j, global - self.offsets[j]))
    }

    /// Base points as 3-vectors; fails unless every fibre carries a base point in R³.
    pub fn bases_s2(&self) -> Result<Vec<Vec3>> {
        self.fibres
            .iter()
            .enumerate()
            .map(|(j, f)| match &f.base {
                Some(b) if b.len() == 3 => Ok([b[0], b[1], b[2]]),
                Some(b) => Err(HdmError::DimensionMismatch {
                    expected: 3,
                    got: b.len(),
                }),
                None => Err(HdmError::invalid("fibres", format!("fibre {j} has no base point"))),
            })
            .collect()
    }

    /// Largest `|⟨x_{j,s}, ξ_j⟩|` and `|‖x_{j,s}‖ - 1|` over all points with a base.
    pub fn tangency_defect(&self) -> (f64, f64) {
        let mut ip: f64 = 0.0;
        let mut unit: f64 = 0.0;
        for f in &self.fibres {
            if let Some(b) = &f.base {
                for p in &f.points {
                    ip = ip.max(dot(b, p).abs());
                    unit = unit.max((norm(p) - 1.0).abs());
                }
            }
        }
        (ip, unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Noiseless,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_base: usize,
    pub n_fibre: usize,
    /// Ambient dimension of the base sphere; only 3 (S²) is supported.
    pub dim: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub eps_pca: f64,
    pub k_pca: usize,
    pub pca_kernel: PcaKernel,
}

impl SamplingConfig {
    pub fn noiseless(n_base: usize, n_fibre: usize, seed: u64) -> Self {
        SamplingConfig {
            n_base,
            n_fibre,
            dim: 3,
            seed,
            mode: SamplingMode::Noiseless,
            eps_pca: (n_base as f64).powf(-0.5),
            k_pca: 100.min(n_base.saturating_sub(1)),
            pca_kernel: PcaKernel::Gaussian5,
        }
    }

    pub fn empirical(n_base: usize, n_fibre: usize, seed: u64) -> Self {
        SamplingConfig {
            mode: SamplingMode::Empirical,
            ..Self::noiseless(n_base, n_fibre, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_base < 2 {
            return Err(HdmError::invalid("n_base", "need at least 2 fibres"));
        }
        if self.n_fibre < 1 {
            return Err(HdmError::invalid("n_fibre", "need at least 1 point per fibre"));
        }
        if self.dim != 3 {
            return Err(HdmError::invalid("dim", "only the unit tangent bundle of S² is supported"));
        }
        if self.mode == SamplingMode::Empirical {
            if !(self.eps_pca > 0.0) {
                return Err(HdmError::invalid("eps_pca", "must be positive"));
            }
            if self.k_pca < self.dim || self.k_pca >= self.n_base {
                return Err(HdmError::NeighborCountTooSmall {
                    k: self.k_pca,
                    needed: self.dim,
                });
            }
        }
        Ok(())
    }
}

/// Bounded densities for rejection sampling.
///
/// `base` is evaluated at points of S², `fibre` at `(base point, unit tangent
/// vector)`. Each must be bounded above by the matching `*_max`, and the
/// product should stay above some positive floor for the sampler to terminate
/// quickly.
pub struct DensityModel<'a> {
    pub base: &'a (dyn Fn(&Vec3) -> f64 + Sync),
    pub base_max: f64,
    pub fibre: &'a (dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    pub fibre_max: f64,
}

fn unit_tangent<R: Rng>(x: &Vec3, rng: &mut R) -> Vec3 {
    let (e1, e2) = frame_s2(x);
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = t.sin_cos();
    [
        c * e1[0] + s * e2[0],
        c * e1[1] + s * e2[1],
        c * e1[2] + s * e2[2],
    ]
}

fn base_points(cfg: &SamplingConfig, density: Option<&DensityModel<'_>>) -> Vec<Vec3> {
    let mut rng = stream_rng(cfg.seed, BASE_STREAM);
    let mut out = Vec::with_capacity(cfg.n_base);
    while out.len() < cfg.n_base {
        let p = sample_sphere_point(3, &mut rng);
        let p = [p[0], p[1], p[2]];
        if let Some(d) = density {
            if rng.gen::<f64>() * d.base_max > (d.base)(&p) {
                continue;
            }
        }
        out.push(p);
    }
    out
}

fn sample_with(cfg: &SamplingConfig, density: Option<&DensityModel<'_>>) -> Result<FibreBundleSample> {
    cfg.validate()?;
    let bases = base_points(cfg, density);
    let fibres: Vec<Fibre> = bases
        .par_iter()
        .enumerate()
        .map(|(j, xi)| {
            let mut rng = stream_rng(cfg.seed, j as u64);
            let mut points = Vec::with_capacity(cfg.n_fibre);
            while points.len() < cfg.n_fibre {
                let v = unit_tangent(xi, &mut rng);
                if let Some(d) = density {
                    if rng.gen::<f64>() * d.fibre_max > (d.fibre)(xi, &v) {
                        continue;
                    }
                }
                points.push(v.to_vec());
            }
            Fibre {
                base: Some(xi.to_vec()),
                points,
            }
        })
        .collect();
    FibreBundleSample::new(fibres)
}

/// Uniform sample of UTS² with exact tangent planes.
pub fn sample_utm_noiseless(cfg: &SamplingConfig) -> Result<FibreBundleSample> {
    if cfg.mode != SamplingMode::Noiseless {
        return Err(HdmError::invalid("mode", "expected noiseless sampling mode"));
    }
    sample_with(cfg, None)
}

/// Noiseless two-step sampling with non-uniform base and fibre densities.
pub fn sample_utm_with_density(cfg: &SamplingConfig, density: &DensityModel<'_>) -> Result<FibreBundleSample> {
    if !(density.base_max > 0.0 && density.fibre_max > 0.0) {
        return Err(HdmError::invalid("density", "bounds must be positive"));
    }
    sample_with(cfg, Some(density))
}

/// Sample drawn through locally estimated tangent planes.
#[derive(Debug, Clone)]
pub struct EmpiricalFibreSample {
    /// Points stored as `τ_{j,s} = B_j c_{j,s}`, normalized.
    pub sample: FibreBundleSample,
    /// Intrinsic coordinates `c_{j,s}`, unit vectors of length `d`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub bases: Vec<PcaBasis>,
}

impl EmpiricalFibreSample {
    /// Recovers bases and coefficients for a stored sample by re-running
    /// local PCA on its base points; `c = Bᵀτ` since `B` has orthonormal columns.
    pub fn from_sample(sample: FibreBundleSample, eps_pca: f64, k_pca: usize, kernel: PcaKernel) -> Result<Self> {
        let base: Vec<Vec<f64>> = sample
            .fibres()
            .iter()
            .map(|f| f.base.clone().ok_or_else(|| HdmError::invalid("base", "every fibre needs a base point")))
            .collect::<Result<_>>()?;
        let d = base.first().map_or(0, Vec::len).saturating_sub(1);
        if d == 0 {
            return Err(HdmError::EmptyInput);
        }
        let bases = local_pca_bases(&base, k_pca, eps_pca, kernel, IntrinsicDim::Fixed(d))?;
        let coefficients = sample
            .fibres()
            .iter()
            .zip(&bases)
            .map(|(f, b)| {
                f.points
                    .iter()
                    .map(|t| {
                        if t.len() != b.ambient_dim() {
                            return Err(HdmError::DimensionMismatch {
                                expected: b.ambient_dim(),
                                got: t.len(),
                            });
                        }
                        let mut c: Vec<f64> = (0..d).map(|k| dot(b.basis.column(k).as_slice(), t)).collect();
                        let n = norm(&c);
                        if !(n > 0.0) {
                            return Err(HdmError::NotTangent(0.0));
                        }
                        c.iter_mut().for_each(|v| *v /= n);
                        Ok(c)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(EmpiricalFibreSample {
            sample,
            coefficients,
            bases,
        })
    }
}

/// Uniform base points; fibres drawn as uniform unit coefficient vectors in
/// local PCA bases estimated from the base cloud.
pub fn sample_utm_empirical(cfg: &SamplingConfig) -> Result<EmpiricalFibreSample> {
    if cfg.mode != SamplingMode::Empirical {
        return Err(HdmError::invalid("mode", "expected empirical sampling mode"));
    }
    cfg.validate()?;
    let base = base_points(cfg, None);
    let d = cfg.dim - 1;
    let bases = local_pca_bases(&base, cfg.k_pca, cfg.eps_pca, cfg.pca_kernel, IntrinsicDim::Fixed(d))?;
    let per_fibre: Vec<(Fibre, Vec<Vec<f64>>)> = base
        .par_iter()
        .zip(&bases)
        .enumerate()
        .map(|(j, (xi, b))| {
            let mut rng = stream_rng(cfg.seed, j as u64);
            let coeffs: Vec<Vec<f64>> = (0..cfg.n_fibre).map(|_| sample_sphere_point(d, &mut rng)).collect();
            let points = coeffs
                .iter()
                .map(|c| {
                    let mut t = b.embed(c);
                    let n = norm(&t);
                    t.iter_mut().for_each(|v| *v /= n);
                    t
                })
                .collect();
            (
                Fibre {
                    base: Some(xi.to_vec()),
                    points,
                },
                coeffs,
            )
        })
        .collect();
    let (fibres, coefficients): (Vec<_>, Vec<_>) = per_fibre.into_iter().unzip();
    Ok(EmpiricalFibreSample {
        sample: FibreBundleSample::new(fibres)?,
        coefficients,
        bases,
    })
}
