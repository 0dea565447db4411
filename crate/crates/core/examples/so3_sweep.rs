//! Sweeps the fibre bandwidth `δ` at desk scale and prints the leading
//! eigenvalue group sizes for each value.
//!
//! Usage: `cargo run --release -p hdm --example so3_sweep -- [eps] [seed] [delta...]`

use std::time::Instant;

use hdm::experiments::{build_so3, so3_spectrum, MultiplicityReport, So3Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eps: f64 = args.first().map_or(Ok(0.1), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(1), |s| s.parse())?;
    let deltas: Vec<f64> = if args.len() > 2 {
        args[2..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    } else {
        vec![0.001, 0.002, 0.005, 0.05, 0.1, 0.2, 20.0]
    };
    for delta in deltas {
        let mut cfg = So3Config { eps, seed, ..So3Config::desk(delta) };
        if let Ok(v) = std::env::var("NCV") { cfg.ncv = Some(v.parse()?); }
        if let Ok(v) = std::env::var("TOL") { cfg.eig_tol = v.parse()?; }
        let start = Instant::now();
        let build = build_so3(&cfg)?;
        let built = start.elapsed().as_secs_f64();
        let d = so3_spectrum(&build, &cfg)?;
        eprintln!("build {built:.1}s, nnz {}, eigs {:.1}s", build.w.matrix.nnz(), start.elapsed().as_secs_f64() - built);
        let r = MultiplicityReport::from_eigenvalues(cfg.clone(), d.values, d.residuals);
        println!(
            "eps {eps} delta {delta:<8} groups {:?} ratios {:.3?} log-ratios {:.3?} regime {} ({:.1}s)",
            &r.group_sizes[..r.group_sizes.len().min(6)],
            &r.ratios[..r.ratios.len().min(3)],
            &r.log_ratios[..r.log_ratios.len().min(3)],
            r.regime_label(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
