//! Small self-contained invariant suite, cheap enough to run on every install.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kernels::{build_w_from_blocks, CorrespondenceBlock, HorizontalDiffusionMatrix};
use crate::laplacian::laplacians_from_w;
use crate::rng::{rng_from_seed, HdmRng};
use crate::sparse::BlockLayout;
use crate::spectral::{block_power_frobenius, eig_sym, hbdm_features, EigOptions, SpectralDecomposition, SpectrumMode, Which};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random connected `W` over `n_fibres` fibres of 1..=`max_size` points:
/// a chain of blocks keeps every point connected, other pairs get a block with
/// probability `density`.
pub fn random_block_w(rng: &mut HdmRng, n_fibres: usize, max_size: usize, density: f64) -> Result<HorizontalDiffusionMatrix> {
    let sizes: Vec<usize> = (0..n_fibres).map(|_| rng.gen_range(1..=max_size)).collect();
    let mut blocks = Vec::new();
    for i in 0..n_fibres {
        for j in i + 1..n_fibres {
            if j != i + 1 && !rng.gen_bool(density) {
                continue;
            }
            let chain = j == i + 1;
            let mut entries = Vec::new();
            for r in 0..sizes[i] {
                for s in 0..sizes[j] {
                    // chain blocks join every point to point 0 across the pair
                    if rng.gen_bool(0.6) || (chain && (r == 0 || s == 0)) {
                        entries.push((r, s, rng.gen_range(0.01..1.0)));
                    }
                }
            }
            if entries.is_empty() {
                entries.push((0, 0, 1.0));
            }
            blocks.push(CorrespondenceBlock {
                i: j,
                j: i,
                entries: entries.iter().map(|&(r, s, w)| (s, r, w)).collect(),
                base_dist: None,
            });
            blocks.push(CorrespondenceBlock {
                i,
                j,
                entries,
                base_dist: None,
            });
        }
    }
    build_w_from_blocks(&sizes, &blocks, None, n_fibres - 1, 1.0)
}

fn dense(m: &crate::sparse::CsrMatrix) -> DMatrix<f64> {
    let rows = m.to_dense();
    DMatrix::from_fn(m.dim(), m.dim(), |i, j| rows[i][j])
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn laplacian_invariants(rng: &mut HdmRng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..20 {
        let n_fibres = rng.gen_range(2..=6);
        let w = random_block_w(rng, n_fibres, 5, 0.5)?;
        let alpha = rng.gen_range(0.0..=1.0);
        let lap = laplacians_from_w(&w, alpha)?;
        let c = lap.checks();
        let eig = SpectralDecomposition::from_dense(&dense(&lap.symmetric()));
        let lo = eig.values[0];
        let hi = *eig.values.last().expect("nonempty");
        let simple = eig.values.get(1).map_or(true, |v| *v > 1e-9);
        ok &= w.invariants().holds()
            && c.row_sum_defect < 1e-9
            && c.symmetry_defect == 0.0
            && c.similarity_defect < 1e-9
            && lo >= -1e-9
            && hi <= 2.0 + 1e-9
            && lo.abs() < 1e-9
            && simple;
        worst = worst.max(c.row_sum_defect).max(c.similarity_defect).max(lo.abs());
    }
    Ok(check("laplacian invariants (20 random W)", ok, format!("worst defect {worst:.1e}")))
}

fn two_vertex() -> Result<Check> {
    let blocks = [
        CorrespondenceBlock { i: 0, j: 1, entries: vec![(0, 0, 1.0)], base_dist: None },
        CorrespondenceBlock { i: 1, j: 0, entries: vec![(0, 0, 1.0)], base_dist: None },
    ];
    let w = build_w_from_blocks(&[1, 1], &blocks, None, 1, 1.0)?;
    let lap = laplacians_from_w(&w, 0.0)?;
    let d = eig_sym(&lap.unnormalized(), &EigOptions::new(2, Which::Smallest))?;
    let ok = d.values[0].abs() < 1e-12 && (d.values[1] - 2.0).abs() < 1e-12;
    Ok(check("two-vertex spectrum (0, 2)", ok, format!("{:?}", d.values)))
}

fn frobenius_identity(rng: &mut HdmRng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let sizes: Vec<usize> = (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(1..=4)).collect();
        let layout = BlockLayout::from_sizes(sizes);
        let n = layout.total();
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let m = &b * b.transpose() / n as f64;
        let t = rng.gen_range(1..=4u32);
        let f = hbdm_features(&SpectralDecomposition::from_dense(&m), &layout, t as f64, n, SpectrumMode::LaplacianLiteral)?;
        for i in 0..layout.num_blocks() {
            for j in 0..layout.num_blocks() {
                let want = block_power_frobenius(&m, &layout, t, i, j)?.powi(2);
                worst = worst.max((f.inner(i, j) - want).abs() / want.max(1e-300));
            }
        }
    }
    Ok(check("Frobenius identity", worst < 1e-8, format!("worst relative error {worst:.1e}")))
}

fn lanczos_vs_dense(rng: &mut HdmRng) -> Result<Check> {
    let n = 50;
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let a = (&a + a.transpose()) / 2.0;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    let csr = crate::sparse::CsrMatrix::from_dense(&rows);
    let dense = SpectralDecomposition::from_dense(&a);
    let d = eig_sym(&csr, &EigOptions::new(8, Which::Smallest))?;
    let worst = d.values.iter().zip(&dense.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(check("Lanczos vs dense eigensolver", worst < 1e-8, format!("max eigenvalue error {worst:.1e}")))
}

/// Runs every check; errors count as failures.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = rng_from_seed(seed);
    let results = [
        two_vertex(),
        laplacian_invariants(&mut rng),
        frobenius_identity(&mut rng),
        lanczos_vs_dense(&mut rng),
    ];
    let names = ["two-vertex spectrum (0, 2)", "laplacian invariants (20 random W)", "Frobenius identity", "Lanczos vs dense eigensolver"];
    results
        .into_iter()
        .zip(names)
        .map(|(r, name)| r.unwrap_or_else(|e| check(name, false, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn random_w_is_connected_and_valid() {
        let mut rng = rng_from_seed(1);
        for _ in 0..10 {
            let w = random_block_w(&mut rng, 5, 4, 0.3).unwrap();
            assert!(w.invariants().holds());
            assert_eq!(w.components(), 1);
        }
    }
}
