//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs sequentially (only one desk-scale operator is alive at a time).
//! Set `HDM_FULL_SCALE=1` to also run the full-scale presets.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use hdm::clustering::{circle_bundle, consistency_details, segment_bundle, CircleBundleConfig, SegmentConfig};
use hdm::experiments::{
    build_so3, check_base_ratios, lift_consistency_check, so3_spectrum, transport_errors, LiftFit, LiftFunction, MultiplicityReport,
    Preset, Regime, So3Config,
};
use hdm::kernels::{build_w_from_blocks, CorrespondenceBlock, HorizontalDiffusionMatrix};
use hdm::laplacian::{laplacians_from_w, LaplacianBundle};
use hdm::rng::rng_from_seed;
use hdm::sampling::SamplingMode;
use hdm::sparse::{BlockLayout, CsrMatrix};
use hdm::spectral::{eig_sym, hbdm_features, EigOptions, SpectralDecomposition, SpectrumMode, Which};
use nalgebra::DMatrix;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_report(cfg: &So3Config) -> Result<(MultiplicityReport, f64), String> {
    let start = Instant::now();
    let build = build_so3(cfg).map_err(|e| e.to_string())?;
    let d = so3_spectrum(&build, cfg).map_err(|e| e.to_string())?;
    let report = MultiplicityReport::from_eigenvalues(cfg.clone(), d.values, d.residuals);
    Ok((report, start.elapsed().as_secs_f64()))
}

fn regime_runs(preset: Preset) -> Result<Vec<(Regime, MultiplicityReport, f64)>, String> {
    Regime::ALL
        .iter()
        .map(|&r| run_report(&So3Config::preset(preset, r)).map(|(rep, t)| (r, rep, t)))
        .collect()
}

fn multiplicities(runs: &[(Regime, MultiplicityReport, f64)]) -> Outcome {
    let mut parts = Vec::new();
    for (regime, report, secs) in runs {
        let lead = &report.group_sizes[..report.group_sizes.len().min(3)];
        ensure(lead == regime.signature(), || {
            format!("{regime}: leading groups {lead:?}, expected {:?}", regime.signature())
        })?;
        ensure(*secs < 300.0, || format!("{regime}: took {secs:.0}s"))?;
        parts.push(format!("{regime} {lead:?} in {secs:.0}s"));
    }
    Ok(parts.join(", "))
}

fn c1_multiplicities() -> Result<(String, Vec<(Regime, MultiplicityReport, f64)>), String> {
    let runs = regime_runs(Preset::Desk)?;
    Ok((multiplicities(&runs)?, runs))
}

fn c2_base_ratios(runs: &[(Regime, MultiplicityReport, f64)]) -> Outcome {
    let (_, report, _) = runs.iter().find(|r| r.0 == Regime::Base).ok_or("no base run")?;
    let check = check_base_ratios(report).map_err(|e| e.to_string())?;
    let r = &report.ratios[..3];
    // independent of the library tolerance: targets l(l+1)/2 for l = 1, 2, 3
    let targets = [1.0, 3.0, 6.0];
    let within = r.iter().zip(targets).all(|(a, b)| (a - b).abs() <= 0.1 * b);
    ensure(within && check.pass, || format!("ratios {r:.3?} vs (1, 3, 6)"))?;
    Ok(format!("ratios {r:.3?}"))
}

/// Literal matrix power, straight from nalgebra.
fn matrix_power(m: &DMatrix<f64>, t: u32) -> DMatrix<f64> {
    (0..t).fold(DMatrix::identity(m.nrows(), m.ncols()), |p, _| &p * m)
}

fn block_frob2(p: &DMatrix<f64>, ri: std::ops::Range<usize>, rj: std::ops::Range<usize>) -> f64 {
    ri.flat_map(|a| rj.clone().map(move |b| (a, b))).map(|(a, b)| p[(a, b)].powi(2)).sum()
}

fn c3_frobenius() -> Outcome {
    let mut rng = rng_from_seed(303);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n_fibres = rng.gen_range(2..=8);
        let sizes: Vec<usize> = (0..n_fibres).map(|_| rng.gen_range(1..=200 / n_fibres)).collect();
        let layout = BlockLayout::from_sizes(sizes);
        let n = layout.total();
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
        let mut m = &b * b.transpose();
        let tr = m.trace();
        m /= tr;
        let t = rng.gen_range(1..=5u32);
        let f = hbdm_features(&SpectralDecomposition::from_dense(&m), &layout, t as f64, n, SpectrumMode::LaplacianLiteral)
            .map_err(|e| e.to_string())?;
        let p = matrix_power(&m, t);
        for i in 0..n_fibres {
            for j in 0..n_fibres {
                let want = block_frob2(&p, layout.range(i), layout.range(j));
                worst = worst.max((f.inner(i, j) - want).abs() / want);
            }
        }
    }
    ensure(worst < 1e-8, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("50 matrices, worst relative error {worst:.1e}"))
}

fn random_w(rng: &mut impl Rng) -> HorizontalDiffusionMatrix {
    loop {
        let nf = rng.gen_range(2..=7);
        let sizes: Vec<usize> = (0..nf).map(|_| rng.gen_range(1..=6)).collect();
        let mut blocks = Vec::new();
        for i in 0..nf {
            for j in i + 1..nf {
                if !rng.gen_bool(0.6) {
                    continue;
                }
                let entries: Vec<(usize, usize, f64)> = (0..sizes[i])
                    .flat_map(|r| (0..sizes[j]).map(move |s| (r, s)))
                    .filter_map(|(r, s)| rng.gen_bool(0.5).then(|| (r, s, rng.gen_range(0.0..2.0))))
                    .collect();
                let base_dist = Some(rng.gen_range(0.0..1.0));
                blocks.push(CorrespondenceBlock { i: j, j: i, entries: entries.iter().map(|&(r, s, w)| (s, r, w)).collect(), base_dist });
                blocks.push(CorrespondenceBlock { i, j, entries, base_dist });
            }
        }
        let w = build_w_from_blocks(&sizes, &blocks, None, nf - 1, 0.5).expect("valid blocks");
        // keep only graphs the Laplacians are defined on
        if w.components() == 1 {
            return w;
        }
    }
}

struct Invariants {
    symmetric: bool,
    diag_blocks_empty: bool,
    row_sum: f64,
    similarity: f64,
}

fn structural(w: &HorizontalDiffusionMatrix, lap: &LaplacianBundle) -> Invariants {
    let m = &w.matrix;
    let symmetric = m.triplets().all(|(i, j, v)| m.get(j, i) == v);
    let diag_blocks_empty = m.triplets().all(|(i, j, _)| w.layout.block_of(i) != w.layout.block_of(j));
    let l = lap.unnormalized();
    let mut row_sum: f64 = 0.0;
    for i in 0..l.dim() {
        let (s, a) = l.row(i).fold((0.0, 0.0), |(s, a), (_, v)| (s + v, a + v.abs()));
        row_sum = row_sum.max(s.abs() / a.max(f64::MIN_POSITIVE));
    }
    // L_* against D^{1/2} L_rw D^{-1/2}, with D recomputed from W_α
    let d: Vec<f64> = (0..lap.w.dim()).map(|i| lap.w.row(i).map(|e| e.1).sum()).collect();
    let (ls, lrw) = (lap.symmetric(), lap.random_walk());
    let similarity = ls
        .triplets()
        .map(|(i, j, v)| (v - d[i].sqrt() * lrw.get(i, j) / d[j].sqrt()).abs())
        .fold(0.0, f64::max);
    Invariants { symmetric, diag_blocks_empty, row_sum, similarity }
}

fn dense_of(m: &CsrMatrix) -> DMatrix<f64> {
    let rows = m.to_dense();
    DMatrix::from_fn(m.dim(), m.dim(), |i, j| rows[i][j])
}

fn check_invariants(label: &str, inv: &Invariants, lo: f64, second: f64, hi: f64) -> Result<(), String> {
    ensure(inv.symmetric, || format!("{label}: W not symmetric"))?;
    ensure(inv.diag_blocks_empty, || format!("{label}: nonzero diagonal block"))?;
    ensure(inv.row_sum < 1e-9, || format!("{label}: row sum defect {:.1e}", inv.row_sum))?;
    ensure(inv.similarity < 1e-9, || format!("{label}: similarity defect {:.1e}", inv.similarity))?;
    ensure(lo >= -1e-9 && hi <= 2.0 + 1e-9, || format!("{label}: spectrum [{lo:.2e}, {hi}]"))?;
    ensure(lo.abs() < 1e-9 && second > 1e-9, || format!("{label}: λ0 = {lo:.1e}, λ1 = {second:.1e}"))
}

fn c4_invariants() -> Outcome {
    let mut rng = rng_from_seed(404);
    for case in 0..100 {
        let w = random_w(&mut rng);
        let alpha = [0.0, 0.5, 1.0][case % 3];
        let lap = laplacians_from_w(&w, alpha).map_err(|e| e.to_string())?;
        let ev = nalgebra::SymmetricEigen::new(dense_of(&lap.symmetric())).eigenvalues;
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let second = ev.get(1).copied().unwrap_or(f64::INFINITY);
        check_invariants(&format!("random W #{case}"), &structural(&w, &lap), ev[0], second, *ev.last().unwrap())?;
    }
    for mode in [SamplingMode::Noiseless, SamplingMode::Empirical] {
        let cfg = So3Config { mode, ..So3Config::preset(Preset::Desk, Regime::Horizontal) };
        let b = build_so3(&cfg).map_err(|e| e.to_string())?;
        let l = b.laplacians.symmetric();
        let mut low = EigOptions::new(2, Which::Smallest);
        low.tol = 1e-8;
        let lows = eig_sym(&l, &low).map_err(|e| e.to_string())?;
        let mut high = EigOptions::new(1, Which::Largest);
        high.tol = 1e-8;
        let top = eig_sym(&l, &high).map_err(|e| e.to_string())?;
        let inv = structural(&b.w_alpha, &b.laplacians);
        let unnormalized_symmetric = b.w.matrix.triplets().all(|(i, j, v)| b.w.matrix.get(j, i) == v);
        ensure(unnormalized_symmetric, || format!("{mode:?} build: W not symmetric"))?;
        check_invariants(&format!("{mode:?} build"), &inv, lows.values[0], lows.values[1], top.values[0])?;
    }
    Ok("100 random W and both SO(3) builds".into())
}

fn c5_transport() -> Outcome {
    let mut medians = Vec::new();
    for n in [500, 1000, 2000] {
        medians.push(transport_errors(n, 10, 55).map_err(|e| e.to_string())?.median);
    }
    ensure(medians.windows(2).all(|w| w[1] < w[0]), || format!("medians {medians:.4?} not decreasing"))?;
    ensure(medians[2] < 0.15, || format!("median at 2000 is {:.4}", medians[2]))?;
    Ok(format!("medians at N_B = 500/1000/2000: {medians:.4?}"))
}

fn lift_fits() -> Result<(LiftFit, LiftFit), String> {
    let cfg = So3Config::lift_check();
    let b = build_so3(&cfg).map_err(|e| e.to_string())?;
    let fit = |g| lift_consistency_check(&b.sample, &b.w_alpha, cfg.eps, g).map_err(|e| e.to_string());
    Ok((fit(LiftFunction::X3)?, fit(LiftFunction::X1)?))
}

fn c6_lift() -> Result<(String, (LiftFit, LiftFit)), String> {
    let (f3, f1) = lift_fits()?;
    ensure(f3.r_squared >= 0.9 && f3.slope > 0.0, || format!("g = x3: slope {:.4}, R² {:.4}", f3.slope, f3.r_squared))?;
    let rel = (f1.slope - f3.slope).abs() / f3.slope.abs();
    ensure(rel <= 0.15, || format!("slopes x1 {:.4} vs x3 {:.4}", f1.slope, f3.slope))?;
    Ok((
        format!("x3 slope {:.4} R² {:.4}; x1 slope {:.4} ({:.1}% apart)", f3.slope, f3.r_squared, f1.slope, 100.0 * rel),
        (f3, f1),
    ))
}

/// Cyclic Jacobi eigenvalue iteration: eigenvalues ascending, eigenvectors as columns.
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(x, x)].total_cmp(&a[(y, y)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

fn c7_eigensolver() -> Outcome {
    let mut rng = rng_from_seed(707);
    let (mut worst_val, mut worst_angle): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let n = 50;
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = (&g + g.transpose()) / 2.0;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
        let d = eig_sym(&CsrMatrix::from_dense(&rows), &EigOptions::new(n, Which::Smallest)).map_err(|e| e.to_string())?;
        let (vals, vecs) = jacobi_eigen(&a);
        for i in 0..n {
            worst_val = worst_val.max((d.values[i] - vals[i]).abs());
            let gap = [i.checked_sub(1), Some(i + 1).filter(|&k| k < n)]
                .iter()
                .flatten()
                .map(|&k| (vals[k] - vals[i]).abs())
                .fold(f64::INFINITY, f64::min);
            if gap > 1e-3 {
                let ip: f64 = (0..n).map(|r| vecs[(r, i)] * d.vectors[i][r]).sum();
                // chord length 2 sin(θ/2); avoids the cancellation in 1 - ip²
                let chord = (0..n).map(|r| (vecs[(r, i)] - ip.signum() * d.vectors[i][r]).powi(2)).sum::<f64>().sqrt();
                worst_angle = worst_angle.max(2.0 * (chord / 2.0).asin());
            }
        }
    }
    ensure(worst_val < 1e-8 && worst_angle < 1e-6, || format!("eigenvalue error {worst_val:.1e}, angle {worst_angle:.1e}"))?;
    Ok(format!("20 matrices, eigenvalue error {worst_val:.1e}, subspace angle {worst_angle:.1e}"))
}

fn segmentation_labels() -> Result<(f64, f64, Vec<usize>), String> {
    let b = circle_bundle(&CircleBundleConfig::default()).map_err(|e| e.to_string())?;
    let cfg = SegmentConfig { seed: 8, ..SegmentConfig::new(3) };
    let (_, seg) = segment_bundle(&b.w, &cfg).map_err(|e| e.to_string())?;
    let c = consistency_details(&seg, &b.truth).map_err(|e| e.to_string())?;
    let worst = c.per_fibre.iter().copied().fold(1.0, f64::min);
    Ok((c.overall, worst, seg.labels))
}

fn c8_segmentation() -> Result<(String, Vec<usize>), String> {
    let (overall, worst, labels) = segmentation_labels()?;
    ensure(overall >= 0.95 && worst >= 0.95, || format!("consistency {overall:.3}, worst fibre {worst:.3}"))?;
    Ok((format!("40 circles x 60 points, consistency {overall:.3}, worst fibre {worst:.3}"), labels))
}

fn c9_determinism(
    first: &[(Regime, MultiplicityReport, f64)],
    lift: &(LiftFit, LiftFit),
    labels: &[usize],
) -> Outcome {
    let again = regime_runs(Preset::Desk)?;
    for ((r, a, _), (_, b, _)) in first.iter().zip(&again) {
        ensure(a.group_sizes == b.group_sizes, || format!("{r}: groups differ"))?;
        let tol = 10.0 * a.config.eig_tol * 2.0;
        let diff = a.eigenvalues.iter().zip(&b.eigenvalues).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(diff <= tol, || format!("{r}: eigenvalues differ by {diff:.1e}"))?;
    }
    ensure(lift_fits()? == *lift, || "lift fits differ".into())?;
    ensure(segmentation_labels()?.2 == labels, || "segmentation labels differ".into())?;
    Ok("criteria 1, 6 and 8 reproduce".into())
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(id: usize, title: &str, outcome: &Result<String, String>, secs: f64) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {id} PASS  {title}: {detail} [{secs:.1}s]"),
        Err(why) => println!("criterion {id} FAIL  {title}: {why} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn timed<T>(f: impl FnOnce() -> Result<T, String>) -> (Result<T, String>, f64) {
    let start = Instant::now();
    let r = guarded(f);
    (r, start.elapsed().as_secs_f64())
}

fn main() {
    let mut all = true;

    let (c1, t1) = timed(c1_multiplicities);
    all &= report(1, "SO(3) multiplicities at desk scale", &c1.as_ref().map(|r| r.0.clone()).map_err(Clone::clone), t1);
    let runs = c1.map(|r| r.1).unwrap_or_default();

    let (c2, t2) = timed(|| c2_base_ratios(&runs));
    all &= report(2, "base-regime eigenvalue ratios", &c2, t2);

    let (c3, t3) = timed(c3_frobenius);
    all &= report(3, "Frobenius identity", &c3, t3);

    let (c4, t4) = timed(c4_invariants);
    all &= report(4, "Laplacian invariants", &c4, t4);

    let (c5, t5) = timed(c5_transport);
    all &= report(5, "transport estimation convergence", &c5, t5);

    let (c6, t6) = timed(c6_lift);
    all &= report(6, "horizontal-lift consistency", &c6.as_ref().map(|r| r.0.clone()).map_err(Clone::clone), t6);

    let (c7, t7) = timed(c7_eigensolver);
    all &= report(7, "eigensolver against a dense oracle", &c7, t7);

    let (c8, t8) = timed(c8_segmentation);
    all &= report(8, "consistent segmentation", &c8.as_ref().map(|r| r.0.clone()).map_err(Clone::clone), t8);

    let (c9, t9) = timed(|| match (&c6, &c8) {
        (Ok((_, lift)), Ok((_, labels))) if !runs.is_empty() => c9_determinism(&runs, lift, labels),
        _ => Err("needs criteria 1, 6 and 8 to have run".into()),
    });
    all &= report(9, "determinism", &c9, t9);

    if std::env::var("HDM_FULL_SCALE").is_ok_and(|v| v == "1") {
        for preset in [Preset::FullNoiseless, Preset::FullEmpirical] {
            let (r, t) = timed(|| regime_runs(preset).and_then(|runs| multiplicities(&runs)));
            all &= report(1, &format!("SO(3) multiplicities, {preset:?} preset"), &r, t);
        }
    }

    if !all {
        eprintln!("acceptance: some criteria failed");
        std::process::exit(1);
    }
}
