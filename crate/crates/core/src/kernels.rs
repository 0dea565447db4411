//! Coupled base/fibre kernels and assembly of the horizontal diffusion matrix.
//!
//! Block `(i, j)` of `W` is nonzero only for base pairs that are mutual
//! nearest neighbors. Inside a block, entry `(r, s)` is nonzero only when
//! the transported point `P_{ji} x_{i,r}` and `x_{j,s}` are mutual nearest
//! neighbors among the fibre points. Each unordered base pair is evaluated
//! once and written to both `(i, j)` and `(j, i)`, so `W` is exactly
//! symmetric.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HdmError, Result};
use crate::geometry::{dist2, mat3_apply, transport_rotation, Vec3};
use crate::knn::{count_components, mutual_edges, KnnIndex, Neighbor};
use crate::localpca::TransportEstimate;
use crate::sampling::{EmpiricalFibreSample, FibreBundleSample};
use crate::sparse::{BlockLayout, CsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelShape {
    Gaussian,
    /// Gaussian restricted to `base_dist2 <= ε`, `fibre_dist2 <= δ`.
    TruncatedGaussian,
    /// `(1 - base_dist2/ε)(1 - fibre_dist2/δ)` on the same unit square.
    EpanechnikovProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub shape: KernelShape,
    /// Base bandwidth, in squared-distance units.
    pub eps: f64,
    /// Fibre bandwidth, in squared-distance units. `+∞` removes the fibre factor.
    pub delta: f64,
}

impl KernelSpec {
    pub fn gaussian(eps: f64, delta: f64) -> Self {
        KernelSpec {
            shape: KernelShape::Gaussian,
            eps,
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(HdmError::invalid("eps", "must be positive and finite"));
        }
        if !(self.delta > 0.0) {
            return Err(HdmError::invalid("delta", "must be positive"));
        }
        Ok(())
    }
}

/// Kernel value for a pair at squared base distance `base_dist2` and squared
/// fibre distance `fibre_dist2`.
pub fn coupled_weight(base_dist2: f64, fibre_dist2: f64, spec: &KernelSpec) -> f64 {
    let a = base_dist2 / spec.eps;
    let b = fibre_dist2 / spec.delta;
    match spec.shape {
        KernelShape::Gaussian => (-(a + b)).exp(),
        KernelShape::TruncatedGaussian => {
            if a > 1.0 || b > 1.0 {
                0.0
            } else {
                (-(a + b)).exp()
            }
        }
        KernelShape::EpanechnikovProduct => {
            if a > 1.0 || b > 1.0 {
                0.0
            } else {
                (1.0 - a) * (1.0 - b)
            }
        }
    }
}

/// Sparse symmetric nonnegative block matrix `W` with its fibre layout and base edges.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalDiffusionMatrix {
    pub layout: BlockLayout,
    pub matrix: CsrMatrix,
    /// Unordered base pairs `(i, j)`, `i < j`, allowed to carry a nonzero block.
    pub base_edges: Vec<(usize, usize)>,
}

/// Structural checks on an assembled `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WInvariants {
    pub symmetry_defect: f64,
    pub min_entry: f64,
    pub diagonal_block_entries: usize,
    pub entries_outside_edges: usize,
}

impl WInvariants {
    pub fn holds(&self) -> bool {
        self.symmetry_defect == 0.0
            && self.min_entry >= 0.0
            && self.diagonal_block_entries == 0
            && self.entries_outside_edges == 0
    }
}

impl HorizontalDiffusionMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn invariants(&self) -> WInvariants {
        let edges: std::collections::HashSet<(usize, usize)> = self.base_edges.iter().copied().collect();
        let mut diag = 0;
        let mut outside = 0;
        let mut min_entry = f64::INFINITY;
        for (p, q, v) in self.matrix.triplets() {
            min_entry = min_entry.min(v);
            let (bi, bj) = (self.layout.block_of(p), self.layout.block_of(q));
            if bi == bj {
                diag += 1;
            } else if !edges.contains(&(bi.min(bj), bi.max(bj))) {
                outside += 1;
            }
        }
        WInvariants {
            symmetry_defect: self.matrix.symmetry_defect(),
            min_entry: if min_entry.is_finite() { min_entry } else { 0.0 },
            diagonal_block_entries: diag,
            entries_outside_edges: outside,
        }
    }

    /// Number of connected components of the graph of nonzero entries.
    pub fn components(&self) -> usize {
        count_components(
            self.dim(),
            self.matrix.triplets().filter(|t| t.2 != 0.0).map(|(p, q, _)| (p, q)),
        )
    }

    pub fn ensure_connected(&self) -> Result<()> {
        match self.components() {
            1 => Ok(()),
            components => Err(HdmError::DisconnectedGraph { components }),
        }
    }
}

/// One computed block: `(r, s, w)` entries for base pair `(i, j)`, `i < j`.
struct Block {
    i: usize,
    j: usize,
    entries: Vec<(u32, u32, f64)>,
}

fn assemble(layout: BlockLayout, blocks: Vec<Block>, base_edges: Vec<(usize, usize)>) -> HorizontalDiffusionMatrix {
    let n = layout.total();
    let mut counts = vec![0usize; n];
    for b in &blocks {
        for &(r, s, _) in &b.entries {
            counts[layout.offsets()[b.i] + r as usize] += 1;
            counts[layout.offsets()[b.j] + s as usize] += 1;
        }
    }
    let mut rows: Vec<Vec<(u32, f64)>> = counts.into_iter().map(Vec::with_capacity).collect();
    for b in blocks {
        let (oi, oj) = (layout.offsets()[b.i], layout.offsets()[b.j]);
        for (r, s, w) in b.entries {
            let (p, q) = (oi + r as usize, oj + s as usize);
            rows[p].push((q as u32, w));
            rows[q].push((p as u32, w));
        }
    }
    HorizontalDiffusionMatrix {
        layout,
        matrix: CsrMatrix::from_rows(rows),
        base_edges,
    }
}

/// Mutual `k`-nearest-neighbor pairs among base points.
pub fn base_edges<P: AsRef<[f64]> + Sync>(bases: &[P], k: usize) -> Vec<(usize, usize)> {
    let index = KnnIndex::new(bases);
    mutual_edges(&index.knn_all(k))
}

/// Mutual-kNN mask on a dense `rows × cols` squared-distance table, row-major.
/// Row `r` keeps its `k` nearest columns, column `s` its `k` nearest rows,
/// ties broken by index; an entry survives only if kept both ways.
fn mutual_mask(d2: &[f64], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    let kr = k.min(cols);
    let kc = k.min(rows);
    let mut by_row = vec![false; rows * cols];
    let mut scratch: Vec<Neighbor> = Vec::with_capacity(rows.max(cols));
    for r in 0..rows {
        scratch.clear();
        scratch.extend((0..cols).map(|s| Neighbor { index: s, dist2: d2[r * cols + s] }));
        if kr < cols {
            scratch.select_nth_unstable(kr - 1);
        }
        for n in &scratch[..kr] {
            by_row[r * cols + n.index] = true;
        }
    }
    let mut mask = vec![false; rows * cols];
    for s in 0..cols {
        scratch.clear();
        scratch.extend((0..rows).map(|r| Neighbor { index: r, dist2: d2[r * cols + s] }));
        if kc < rows {
            scratch.select_nth_unstable(kc - 1);
        }
        for n in &scratch[..kc] {
            let p = n.index * cols + s;
            mask[p] = by_row[p];
        }
    }
    mask
}

fn fibre_block(
    i: usize,
    j: usize,
    base_d2: f64,
    fibre_d2: &[f64],
    rows: usize,
    cols: usize,
    k_fibre: usize,
    spec: &KernelSpec,
) -> Block {
    let mask = mutual_mask(fibre_d2, rows, cols, k_fibre);
    let mut entries = Vec::new();
    for r in 0..rows {
        for s in 0..cols {
            let p = r * cols + s;
            if mask[p] {
                let w = coupled_weight(base_d2, fibre_d2[p], spec);
                // subnormal weights only slow the matvec down
                if w >= f64::MIN_POSITIVE {
                    entries.push((r as u32, s as u32, w));
                }
            }
        }
    }
    Block { i, j, entries }
}

fn check_counts(num_fibres: usize, k_base: usize, k_fibre: usize, sizes: &[usize]) -> Result<()> {
    if k_base == 0 || k_base >= num_fibres {
        return Err(HdmError::invalid("k_base", format!("need 0 < K_B < N_B = {num_fibres}")));
    }
    let min_size = sizes.iter().copied().min().unwrap_or(0);
    if k_fibre == 0 || k_fibre > min_size {
        return Err(HdmError::invalid("k_fibre", format!("need 0 < K_F <= N_F = {min_size}")));
    }
    Ok(())
}

fn points3(sample: &FibreBundleSample, j: usize) -> Result<Vec<Vec3>> {
    sample.fibres()[j]
        .points
        .iter()
        .map(|p| crate::geometry::as_vec3(p))
        .collect()
}

/// `W` for a sample of UTS² using exact parallel transport between fibres.
pub fn build_w_noiseless(
    sample: &FibreBundleSample,
    k_base: usize,
    k_fibre: usize,
    spec: &KernelSpec,
) -> Result<HorizontalDiffusionMatrix> {
    spec.validate()?;
    let sizes = sample.sizes();
    check_counts(sample.num_fibres(), k_base, k_fibre, &sizes)?;
    let bases = sample.bases_s2()?;
    let pts: Vec<Vec<Vec3>> = (0..sample.num_fibres())
        .map(|j| points3(sample, j))
        .collect::<Result<_>>()?;
    let edges = base_edges(&bases, k_base);
    let blocks: Vec<Block> = edges
        .par_iter()
        .map(|&(i, j)| {
            let rot = transport_rotation(&bases[i], &bases[j])?;
            let moved: Vec<Vec3> = pts[i].iter().map(|x| mat3_apply(&rot, x)).collect();
            let (rows, cols) = (moved.len(), pts[j].len());
            let mut d2 = Vec::with_capacity(rows * cols);
            for a in &moved {
                for b in &pts[j] {
                    d2.push(dist2(a, b));
                }
            }
            let bd2 = dist2(&bases[i], &bases[j]);
            Ok(fibre_block(i, j, bd2, &d2, rows, cols, k_fibre, spec))
        })
        .collect::<Result<_>>()?;
    let w = assemble(BlockLayout::from_sizes(sizes), blocks, edges);
    w.ensure_connected()?;
    Ok(w)
}

/// Orthogonal maps `O_ji` keyed by `(from, to)`; the reverse direction is the transpose.
pub struct TransportTable {
    map: HashMap<(usize, usize), DMatrix<f64>>,
}

impl TransportTable {
    pub fn new(estimates: &[TransportEstimate]) -> Self {
        TransportTable {
            map: estimates.iter().map(|t| ((t.from, t.to), t.o.clone())).collect(),
        }
    }

    /// `O_{to, from}` mapping coordinates at `from` to coordinates at `to`.
    pub fn get(&self, from: usize, to: usize) -> Option<DMatrix<f64>> {
        self.map
            .get(&(from, to))
            .cloned()
            .or_else(|| self.map.get(&(to, from)).map(|m| m.transpose()))
    }
}

/// `W` from coefficient vectors in estimated bases, with fibre distances
/// `|O_ji c_{i,r} - c_{j,s}|²`.
pub fn build_w_empirical(
    sample: &EmpiricalFibreSample,
    transports: &TransportTable,
    k_base: usize,
    k_fibre: usize,
    spec: &KernelSpec,
) -> Result<HorizontalDiffusionMatrix> {
    spec.validate()?;
    let s = &sample.sample;
    let sizes = s.sizes();
    check_counts(s.num_fibres(), k_base, k_fibre, &sizes)?;
    let bases: Vec<Vec<f64>> = s
        .fibres()
        .iter()
        .enumerate()
        .map(|(j, f)| {
            f.base
                .clone()
                .ok_or_else(|| HdmError::invalid("fibres", format!("fibre {j} has no base point")))
        })
        .collect::<Result<_>>()?;
    let edges = base_edges(&bases, k_base);
    let blocks: Vec<Block> = edges
        .par_iter()
        .map(|&(i, j)| {
            let o = transports
                .get(i, j)
                .ok_or_else(|| HdmError::invalid("transports", format!("no transport for pair ({i}, {j})")))?;
            let ci = &sample.coefficients[i];
            let cj = &sample.coefficients[j];
            let moved: Vec<Vec<f64>> = ci
                .iter()
                .map(|c| {
                    (0..o.nrows())
                        .map(|r| (0..o.ncols()).map(|k| o[(r, k)] * c[k]).sum())
                        .collect()
                })
                .collect();
            let mut d2 = Vec::with_capacity(ci.len() * cj.len());
            for a in &moved {
                for b in cj {
                    d2.push(dist2(a, b));
                }
            }
            let bd2 = dist2(&bases[i], &bases[j]);
            Ok(fibre_block(i, j, bd2, &d2, ci.len(), cj.len(), k_fibre, spec))
        })
        .collect::<Result<_>>()?;
    let w = assemble(BlockLayout::from_sizes(sizes), blocks, edges);
    w.ensure_connected()?;
    Ok(w)
}

/// A precomputed similarity block `ρ_ij` between fibres `i` and `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceBlock {
    pub i: usize,
    pub j: usize,
    /// Sparse `(r, s, w)` entries, `w >= 0`.
    pub entries: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dist: Option<f64>,
}

const BLOCK_SYM_TOL: f64 = 1e-12;

/// `W` from user-supplied correspondence blocks.
///
/// Block `(i, j)` becomes `exp(-d_ij²/ε_B)·ρ_ij` when `i` and `j` are mutual
/// `n_neighbors`-nearest fibres by base distance, zero otherwise. Distances
/// come from `base_dists` when given, else from the blocks; a missing
/// distance counts as zero.
pub fn build_w_from_blocks(
    sizes: &[usize],
    blocks: &[CorrespondenceBlock],
    base_dists: Option<&[Vec<f64>]>,
    n_neighbors: usize,
    eps_b: f64,
) -> Result<HorizontalDiffusionMatrix> {
    if !(eps_b > 0.0) {
        return Err(HdmError::invalid("eps_b", "must be positive"));
    }
    let nf = sizes.len();
    if sizes.iter().any(|&s| s == 0) {
        return Err(HdmError::invalid("sizes", "every fibre needs at least one point"));
    }
    let mut by_pair: HashMap<(usize, usize), &CorrespondenceBlock> = HashMap::new();
    for b in blocks {
        if b.i >= nf || b.j >= nf {
            return Err(HdmError::IndexOutOfRange {
                index: b.i.max(b.j),
                len: nf,
            });
        }
        if b.i == b.j {
            return Err(HdmError::invalid("blocks", format!("diagonal block ({}, {}) is not allowed", b.i, b.i)));
        }
        for &(r, s, w) in &b.entries {
            if r >= sizes[b.i] || s >= sizes[b.j] {
                return Err(HdmError::IndexOutOfRange {
                    index: r.max(s),
                    len: sizes[b.i].max(sizes[b.j]),
                });
            }
            if w < 0.0 || w.is_nan() {
                return Err(HdmError::NegativeWeight { i: b.i, j: b.j, value: w });
            }
        }
        if by_pair.insert((b.i, b.j), b).is_some() {
            return Err(HdmError::invalid("blocks", format!("duplicate block ({}, {})", b.i, b.j)));
        }
    }
    let dense = |b: &CorrespondenceBlock, transpose: bool| {
        let mut m: HashMap<(usize, usize), f64> = HashMap::new();
        for &(r, s, w) in &b.entries {
            let key = if transpose { (s, r) } else { (r, s) };
            *m.entry(key).or_insert(0.0) += w;
        }
        m
    };
    for (&(i, j), b) in &by_pair {
        if i > j {
            continue;
        }
        let rev = by_pair.get(&(j, i)).ok_or(HdmError::AsymmetricBlocks { i, j })?;
        let fwd = dense(b, false);
        let back = dense(rev, true);
        let mismatch = fwd
            .iter()
            .any(|(k, v)| (v - back.get(k).copied().unwrap_or(0.0)).abs() > BLOCK_SYM_TOL)
            || back
                .iter()
                .any(|(k, v)| (v - fwd.get(k).copied().unwrap_or(0.0)).abs() > BLOCK_SYM_TOL);
        if mismatch {
            return Err(HdmError::AsymmetricBlocks { i, j });
        }
    }
    for &(i, j) in by_pair.keys() {
        if !by_pair.contains_key(&(j, i)) {
            return Err(HdmError::AsymmetricBlocks { i: i.min(j), j: i.max(j) });
        }
    }

    let dist = |i: usize, j: usize| -> Result<Option<f64>> {
        if let Some(d) = base_dists {
            let (a, b) = (d[i][j], d[j][i]);
            if (a - b).abs() > BLOCK_SYM_TOL * a.abs().max(1.0) {
                return Err(HdmError::invalid("base_dists", format!("d[{i}][{j}] != d[{j}][{i}]")));
            }
            return Ok(Some(a));
        }
        Ok(by_pair.get(&(i, j)).and_then(|b| b.base_dist).or_else(|| by_pair.get(&(j, i)).and_then(|b| b.base_dist)))
    };
    if let Some(d) = base_dists {
        if d.len() != nf || d.iter().any(|r| r.len() != nf) {
            return Err(HdmError::SizeMismatch(d.len(), nf));
        }
    }

    // candidates per fibre: all fibres with a known distance (matrix) or with a block
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); nf];
    for (i, list) in neighbors.iter_mut().enumerate() {
        let mut cand: Vec<Neighbor> = Vec::new();
        for j in 0..nf {
            if j == i {
                continue;
            }
            if base_dists.is_none() && !by_pair.contains_key(&(i, j)) {
                continue;
            }
            let d = dist(i, j)?.unwrap_or(0.0);
            cand.push(Neighbor { index: j, dist2: d * d });
        }
        cand.sort();
        list.extend(cand.into_iter().take(n_neighbors).map(|n| n.index));
    }
    let gated = mutual_edges(&neighbors);

    let mut out = Vec::new();
    let mut edges = Vec::new();
    for (i, j) in gated {
        let Some(b) = by_pair.get(&(i, j)) else { continue };
        let d = dist(i, j)?.unwrap_or(0.0);
        let scale = (-(d * d) / eps_b).exp();
        let mut merged: Vec<((usize, usize), f64)> = dense(b, false).into_iter().collect();
        merged.sort_by_key(|e| e.0);
        let entries: Vec<(u32, u32, f64)> = merged
            .into_iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|((r, s), w)| (r as u32, s as u32, scale * w))
            .collect();
        edges.push((i, j));
        out.push(Block { i, j, entries });
    }
    Ok(assemble(BlockLayout::from_sizes(sizes.to_vec()), out, edges))
}
