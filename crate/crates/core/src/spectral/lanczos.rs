//! Thick-restart Lanczos for a few extreme eigenpairs of a symmetric operator.
//!
//! The Krylov basis is fully reorthogonalized (classical Gram-Schmidt, two
//! passes). At each restart the wanted Ritz vectors plus the residual
//! direction are kept, which is mathematically equivalent to implicit
//! restarting with exact shifts. An invariant subspace triggers a fresh random
//! direction, so exactly repeated eigenvalues are still found. After
//! convergence, a deflated search in the orthogonal complement of the
//! returned vectors checks that no more extreme eigenvalue was missed.

use nalgebra::DMatrix;

use super::symmetric_eigen;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LinearOperator, SpectralDecomposition};
use crate::error::{HdmError, Result};
use crate::rng::{rng_from_seed, HdmRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Smallest,
    Largest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigOptions {
    pub k: usize,
    pub which: Which,
    /// Residual bound relative to the operator norm: `|A v - λ v| <= tol·|A|`.
    pub tol: f64,
    pub max_restarts: usize,
    /// Krylov subspace size; `None` picks `max(2k + 32, 64)` capped at the dimension.
    pub ncv: Option<usize>,
    pub seed: u64,
    /// Search the deflated complement for missed eigenvalues after convergence.
    pub verify: bool,
}

impl EigOptions {
    pub fn new(k: usize, which: Which) -> Self {
        EigOptions {
            k,
            which,
            tol: 1e-10,
            max_restarts: 2000,
            ncv: None,
            seed: 0x5eed,
            verify: true,
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-8;
const MAX_VERIFY_ROUNDS: usize = 8;
const BREAKDOWN_TOL: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn random_unit(n: usize, rng: &mut HdmRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let nv = norm(&v);
        if nv > 0.0 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Removes the components of `w` along `basis` (two passes); returns the
/// accumulated coefficients.
fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; basis.len()];
    if basis.is_empty() {
        return total;
    }
    for _ in 0..2 {
        let h: Vec<f64> = basis.par_iter().map(|v| dot(v, w)).collect();
        w.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
            let start = c * 4096;
            for (i, hi) in h.iter().enumerate() {
                let v = &basis[i][start..start + chunk.len()];
                for (x, vi) in chunk.iter_mut().zip(v) {
                    *x -= hi * vi;
                }
            }
        });
        for (t, hi) in total.iter_mut().zip(&h) {
            *t += hi;
        }
    }
    total
}

/// Projects `w` off both the locked vectors and the Krylov basis, twice over
/// so that near-breakdown steps do not amplify locked components; returns
/// the coefficients along `basis`.
fn orthogonalize_both(w: &mut [f64], locked: &[Vec<f64>], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; basis.len()];
    for _ in 0..2 {
        orthogonalize(w, locked);
        for (t, c) in total.iter_mut().zip(orthogonalize(w, basis)) {
            *t += c;
        }
    }
    total
}

/// A random unit vector orthogonal to `locked` and `basis`.
fn random_orthogonal(n: usize, locked: &[Vec<f64>], basis: &[Vec<f64>], rng: &mut HdmRng) -> Vec<f64> {
    loop {
        let mut v = random_unit(n, rng);
        orthogonalize_both(&mut v, locked, basis);
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            return v;
        }
    }
}

/// `Σ_i coeffs[i]·basis[i]`
fn combine(basis: &[Vec<f64>], coeffs: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
        let start = c * 4096;
        let len = chunk.len();
        for (v, &a) in basis.iter().zip(coeffs) {
            if a == 0.0 {
                continue;
            }
            for (o, vi) in chunk.iter_mut().zip(&v[start..start + len]) {
                *o += a * vi;
            }
        }
    });
    out
}

struct Signed<'a, A: LinearOperator + ?Sized> {
    op: &'a A,
    sign: f64,
}

impl<A: LinearOperator + ?Sized> Signed<'_, A> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply(x, y);
        if self.sign < 0.0 {
            y.par_iter_mut().for_each(|v| *v = -*v);
        }
    }
}

struct RunResult {
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    restarts: usize,
    norm_est: f64,
}

/// Largest `want` eigenpairs of the signed operator restricted to the
/// orthogonal complement of `locked`.
#[allow(clippy::too_many_arguments)]
fn thick_restart<A: LinearOperator + ?Sized>(
    op: &Signed<'_, A>,
    locked: &[Vec<f64>],
    want: usize,
    ncv: usize,
    tol: f64,
    max_restarts: usize,
    rng: &mut HdmRng,
    norm_hint: f64,
) -> Result<RunResult> {
    let n = op.op.dim();
    let m = ncv.min(n - locked.len()).max(want);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    basis.push(random_orthogonal(n, locked, &[], rng));
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut kept = 0usize;
    let mut norm_est = norm_hint;
    let mut w = vec![0.0; n];

    for restart in 0..=max_restarts {
        let mut beta_last = 0.0;
        for j in kept..m {
            op.apply(&basis[j], &mut w);
            let coeffs = orthogonalize_both(&mut w, locked, &basis[..=j]);
            for (i, c) in coeffs.iter().enumerate() {
                h[(i, j)] = *c;
                h[(j, i)] = *c;
            }
            let beta = norm(&w);
            norm_est = norm_est.max(coeffs[j].abs());
            let breakdown = beta <= BREAKDOWN_TOL * norm_est.max(f64::MIN_POSITIVE);
            if j + 1 == m {
                beta_last = if breakdown { 0.0 } else { beta };
                if !breakdown {
                    basis.push(w.iter().map(|x| x / beta).collect());
                }
                break;
            }
            if breakdown {
                let v = random_orthogonal(n, locked, &basis, rng);
                basis.push(v);
            } else {
                basis.push(w.iter().map(|x| x / beta).collect());
            }
        }

        let (evals, evecs) = symmetric_eigen(&h);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| evals[b].total_cmp(&evals[a]).then(a.cmp(&b)));
        for &i in &order {
            norm_est = norm_est.max(evals[i].abs());
        }
        let resid: Vec<f64> = order
            .iter()
            .map(|&i| (beta_last * evecs[(m - 1, i)]).abs())
            .collect();
        let threshold = tol * norm_est;
        let converged = resid[..want].iter().filter(|&&r| r <= threshold).count();
        log::trace!(
            "lanczos restart {restart}: {converged}/{want} converged, worst residual {:.2e}",
            resid[..want].iter().fold(0.0f64, |a, &b| a.max(b))
        );

        if converged == want || beta_last == 0.0 || m + locked.len() >= n {
            let values: Vec<f64> = order[..want].iter().map(|&i| evals[i]).collect();
            let vectors: Vec<Vec<f64>> = order[..want]
                .iter()
                .map(|&i| {
                    let y: Vec<f64> = evecs.column(i).iter().copied().collect();
                    combine(&basis[..m], &y, n)
                })
                .collect();
            // accept only if true residuals (of the deflated operator) agree with the estimates
            let mut ok = true;
            let mut av = vec![0.0; n];
            for (v, &lam) in vectors.iter().zip(&values) {
                op.apply(v, &mut av);
                orthogonalize(&mut av, locked);
                let r: f64 = av.iter().zip(v).map(|(a, b)| (a - lam * b).powi(2)).sum::<f64>().sqrt();
                if r > threshold {
                    log::trace!("lanczos: true residual {r:.2e} above {threshold:.2e} at {lam}");
                    ok = false;
                    break;
                }
            }
            // a basis spanning the whole complement makes the Ritz pairs exact
            if ok || m + locked.len() >= n {
                return Ok(RunResult {
                    values,
                    vectors,
                    restarts: restart,
                    norm_est,
                });
            }
        }
        if restart == max_restarts {
            return Err(HdmError::NoConvergence {
                converged,
                requested: want,
                iterations: restart,
            });
        }

        // keep the leading Ritz vectors plus the residual direction
        let keep = ((m + want) / 2).max(want + 1).min(m - 1);
        let residual = if basis.len() > m {
            basis.pop().expect("residual vector")
        } else {
            random_orthogonal(n, locked, &basis, rng)
        };
        let mut next: Vec<Vec<f64>> = order[..keep]
            .iter()
            .map(|&i| {
                let y: Vec<f64> = evecs.column(i).iter().copied().collect();
                combine(&basis[..m], &y, n)
            })
            .collect();
        next.push(residual);
        basis = next;
        h.fill(0.0);
        for (r, &i) in order[..keep].iter().enumerate() {
            h[(r, r)] = evals[i];
            let s = beta_last * evecs[(m - 1, i)];
            h[(r, keep)] = s;
            h[(keep, r)] = s;
        }
        kept = keep;
    }
    unreachable!("loop returns on the last restart")
}

fn check_symmetric<A: LinearOperator + ?Sized>(op: &A, rng: &mut HdmRng) -> Result<()> {
    let n = op.dim();
    for _ in 0..2 {
        let x = random_unit(n, rng);
        let y = random_unit(n, rng);
        let mut ax = vec![0.0; n];
        let mut ay = vec![0.0; n];
        op.apply(&x, &mut ax);
        op.apply(&y, &mut ay);
        let scale = norm(&ax).max(norm(&ay)).max(f64::MIN_POSITIVE);
        let defect = (dot(&x, &ay) - dot(&y, &ax)).abs() / scale;
        if defect > SYMMETRY_TOL {
            return Err(HdmError::NotSymmetric(defect));
        }
    }
    Ok(())
}

/// Flips `v` so its first entry of non-negligible magnitude is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * max) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// `k` eigenpairs at the requested end of the spectrum, eigenvalues ascending.
pub fn eig_sym<A: LinearOperator + ?Sized>(op: &A, opts: &EigOptions) -> Result<SpectralDecomposition> {
    let n = op.dim();
    if opts.k == 0 || opts.k > n {
        return Err(HdmError::invalid("k", format!("need 0 < k <= {n}")));
    }
    if !(opts.tol > 0.0) {
        return Err(HdmError::invalid("tol", "must be positive"));
    }
    let mut rng = rng_from_seed(opts.seed);
    check_symmetric(op, &mut rng)?;
    let signed = Signed {
        op,
        sign: match opts.which {
            Which::Largest => 1.0,
            Which::Smallest => -1.0,
        },
    };
    let ncv = opts
        .ncv
        .unwrap_or((2 * opts.k + 32).max(64))
        .max(opts.k + 2)
        .min(n);
    let mut run = thick_restart(&signed, &[], opts.k, ncv, opts.tol, opts.max_restarts, &mut rng, 0.0)?;
    log::debug!("lanczos: {} pairs after {} restarts", opts.k, run.restarts);

    if opts.verify && opts.k < n {
        for _ in 0..MAX_VERIFY_ROUNDS {
            let room = n - opts.k;
            let vncv = ncv.min(room).max(1);
            let extra = thick_restart(
                &signed,
                &run.vectors,
                1,
                vncv,
                opts.tol,
                opts.max_restarts,
                &mut rng,
                run.norm_est,
            )?;
            let floor = *run.values.last().expect("k > 0");
            let margin = opts.tol * run.norm_est.max(extra.norm_est);
            if extra.values[0] <= floor + margin {
                break;
            }
            log::debug!("lanczos: verification found a missed eigenvalue {}", extra.values[0]);
            // swap the missed pair in and drop the least extreme one
            run.values.pop();
            run.vectors.pop();
            let pos = run.values.partition_point(|&v| v >= extra.values[0]);
            run.values.insert(pos, extra.values[0]);
            run.vectors.insert(pos, extra.vectors.into_iter().next().expect("one vector"));
            // re-orthonormalize the set against rounding drift
            for i in 0..run.vectors.len() {
                let (head, tail) = run.vectors.split_at_mut(i);
                orthogonalize(&mut tail[0], head);
                let nv = norm(&tail[0]);
                tail[0].iter_mut().for_each(|x| *x /= nv);
            }
        }
    }

    let mut av = vec![0.0; n];
    let mut pairs: Vec<(f64, Vec<f64>, f64)> = run
        .vectors
        .into_iter()
        .map(|mut v| {
            fix_sign(&mut v);
            op.apply(&v, &mut av);
            let lam = dot(&v, &av);
            let r = av.iter().zip(&v).map(|(a, b)| (a - lam * b).powi(2)).sum::<f64>().sqrt();
            (lam, v, r)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = SpectralDecomposition::default();
    for (l, v, r) in pairs {
        out.values.push(l);
        out.vectors.push(v);
        out.residuals.push(r);
    }
    out.norm_estimate = run.norm_est;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;
    use nalgebra::SymmetricEigen;

    fn random_sym(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.sample(StandardNormal);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        a
    }

    #[test]
    fn two_by_two() {
        let l = CsrMatrix::from_dense(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let d = eig_sym(&l, &EigOptions::new(2, Which::Smallest)).unwrap();
        assert!(d.values[0].abs() < 1e-12);
        assert!((d.values[1] - 2.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d.vectors[0][0] - s).abs() < 1e-12 && (d.vectors[0][1] - s).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_partial() {
        let a = random_sym(120, 3);
        let m = CsrMatrix::from_dense(&a);
        let dense = SymmetricEigen::new(DMatrix::from_fn(120, 120, |i, j| a[i][j]));
        let mut ev: Vec<f64> = dense.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let lo = eig_sym(&m, &EigOptions::new(6, Which::Smallest)).unwrap();
        let hi = eig_sym(&m, &EigOptions::new(6, Which::Largest)).unwrap();
        for i in 0..6 {
            assert!((lo.values[i] - ev[i]).abs() < 1e-8);
            assert!((hi.values[i] - ev[114 + i]).abs() < 1e-8);
        }
        assert!(lo.orthonormality_defect() < 1e-8);
    }

    #[test]
    fn exact_multiplicity_found() {
        // block diagonal: three identical path-graph Laplacians
        let n = 30;
        let mut a = vec![vec![0.0; 3 * n]; 3 * n];
        for b in 0..3 {
            for i in 0..n - 1 {
                let (p, q) = (b * n + i, b * n + i + 1);
                a[p][q] = -1.0;
                a[q][p] = -1.0;
                a[p][p] += 1.0;
                a[q][q] += 1.0;
            }
        }
        let m = CsrMatrix::from_dense(&a);
        let d = eig_sym(&m, &EigOptions::new(6, Which::Smallest)).unwrap();
        let second = 2.0 - 2.0 * (std::f64::consts::PI / n as f64).cos();
        for i in 0..3 {
            assert!(d.values[i].abs() < 1e-9, "{:?}", d.values);
            assert!((d.values[3 + i] - second).abs() < 1e-9, "{:?}", d.values);
        }
    }

    #[test]
    fn rejects_asymmetric_and_bad_k() {
        let m = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(
            eig_sym(&m, &EigOptions::new(1, Which::Largest)),
            Err(HdmError::NotSymmetric(_))
        ));
        let s = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(eig_sym(&s, &EigOptions::new(3, Which::Largest)).is_err());
    }

    #[test]
    fn identity_operator() {
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let d = eig_sym(&CsrMatrix::from_dense(&rows), &EigOptions::new(5, Which::Largest)).unwrap();
        assert!(d.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(d.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn no_convergence_reported() {
        let a = random_sym(200, 8);
        let m = CsrMatrix::from_dense(&a);
        let mut o = EigOptions::new(10, Which::Smallest);
        o.max_restarts = 0;
        o.ncv = Some(12);
        assert!(matches!(eig_sym(&m, &o), Err(HdmError::NoConvergence { .. })));
    }
}
