use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdm::clustering::{circle_bundle, consistency_details, segment_bundle, CircleBundleConfig, SegmentConfig, DEFAULT_RESTARTS};
use hdm::experiments::{assemble_so3, desk_delta, run_so3_experiment, Preset, Regime, So3Config, DESK_EPS};
use hdm::io::{self, fibre_index, BlockEntry, DatasetManifest, FibreEntry, MANIFEST_VERSION};
use hdm::kernels::HorizontalDiffusionMatrix;
use hdm::laplacian::{laplacians_from_w, LaplacianBundle};
use hdm::sampling::{sample_utm_empirical, sample_utm_noiseless, SamplingConfig, SamplingMode};
use hdm::spectral::{
    default_truncation, eig_sym, hbdd, hbdm_features, hdd, hdm_coords, EigOptions, SpectralDecomposition, SpectrumMode, Which,
};
use hdm::HdmError;

#[derive(Parser)]
#[command(name = "hdm", version, about = "Horizontal diffusion maps on fibre-bundle data")]
struct Cli {
    /// Worker threads (falls back to HDM_THREADS, then all cores)
    #[arg(long, global = true, env = "HDM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset and write it as a manifest
    Sample(SampleArgs),
    /// Assemble W from a dataset and write it as sparse triplets
    Build(BuildArgs),
    /// Smallest eigenpairs of a Laplacian of the dataset
    Eigs(EigsArgs),
    /// HDM point coordinates and HBDM fibre features
    Embed(EmbedArgs),
    /// HDD between two points or HBDD between two fibres
    Dist(DistArgs),
    /// SO(3) eigenvalue multiplicity experiment
    So3(So3Args),
    /// Spectral segmentation of a dataset or of the circle benchmark
    Segment(SegmentArgs),
    /// Run the built-in invariant suite
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Noiseless,
    Empirical,
}

impl From<Mode> for SamplingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Noiseless => SamplingMode::Noiseless,
            Mode::Empirical => SamplingMode::Empirical,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Unit tangent bundle of S²
    So3,
    /// Synthetic circle bundle with correspondence blocks
    Circle,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum, default_value = "so3")]
    kind: Kind,
    #[arg(long, value_enum, default_value = "noiseless")]
    mode: Mode,
    /// Number of fibres
    #[arg(long, default_value_t = 200)]
    nb: usize,
    /// Points per fibre
    #[arg(long, default_value_t = 20)]
    nf: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "dataset.json")]
    out: PathBuf,
}

/// How `W` is assembled from a dataset.
#[derive(Args, Clone)]
struct KernelArgs {
    /// Base bandwidth ε (ε_B for datasets with correspondence blocks)
    #[arg(long)]
    eps: Option<f64>,
    /// Fibre bandwidth δ
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Base nearest neighbours
    #[arg(long)]
    kb: Option<usize>,
    /// Fibre nearest neighbours
    #[arg(long)]
    kf: Option<usize>,
    /// Transport between fibres: exact, or estimated by local PCA
    #[arg(long, value_enum, default_value = "noiseless")]
    mode: Mode,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, default_value = "dataset.json")]
    input: PathBuf,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Also write the α-normalized matrix instead of W
    #[arg(long)]
    normalized: bool,
    #[arg(long, default_value = "w.txt")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Operator {
    /// L_* = I - D^{-1/2} W_α D^{-1/2}
    Symmetric,
    /// L = D - W_α
    Unnormalized,
}

#[derive(Args)]
struct EigsArgs {
    #[arg(long, default_value = "dataset.json")]
    input: PathBuf,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Number of eigenpairs
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, value_enum, default_value = "symmetric")]
    operator: Operator,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "eigs.csv")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EmbedParams {
    #[command(flatten)]
    kernel: KernelArgs,
    /// Eigenpairs used (default ⌈√κ⌉)
    #[arg(long)]
    k: Option<usize>,
    /// Diffusion time
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value = "laplacian-literal")]
    spectrum: SpectrumMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, default_value = "dataset.json")]
    input: PathBuf,
    #[command(flatten)]
    params: EmbedParams,
    #[arg(long, default_value = "embedding.csv")]
    out: PathBuf,
    #[arg(long, default_value = "features.csv")]
    features: PathBuf,
}

#[derive(Args)]
struct DistArgs {
    #[arg(long, default_value = "dataset.json")]
    input: PathBuf,
    #[command(flatten)]
    params: EmbedParams,
    /// First point as `fibre:point` (HDD)
    #[arg(long, requires = "q", conflicts_with_all = ["i", "j"])]
    p: Option<String>,
    /// Second point as `fibre:point`
    #[arg(long, requires = "p")]
    q: Option<String>,
    /// First fibre (HBDD)
    #[arg(long, requires = "j")]
    i: Option<usize>,
    /// Second fibre
    #[arg(long, requires = "i")]
    j: Option<usize>,
}

#[derive(Args)]
struct So3Args {
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Regime whose preset δ is used when --delta is absent
    #[arg(long, default_value = "horizontal")]
    regime: Regime,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    nf: Option<usize>,
    #[arg(long)]
    kb: Option<usize>,
    #[arg(long)]
    kf: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of smallest eigenvalues
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Two-column `index eigenvalue` file for plotting
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Dataset with correspondence blocks (omit with --benchmark)
    #[arg(long, required_unless_present = "benchmark")]
    input: Option<PathBuf>,
    /// Segment the synthetic circle bundle and report consistency
    #[arg(long)]
    benchmark: bool,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Eigenpairs computed (default: cluster count)
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value = "diffusion")]
    spectrum: SpectrumMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value = "segmentation.csv")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Hdm(HdmError),
    /// Checks ran but did not pass.
    Check(String),
}

impl From<HdmError> for Failure {
    fn from(e: HdmError) -> Self {
        Failure::Hdm(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Hdm(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Sample(a) => sample(a),
        Command::Build(a) => build(a),
        Command::Eigs(a) => eigs(a),
        Command::Embed(a) => embed(a),
        Command::Dist(a) => dist(a),
        Command::So3(a) => so3(a),
        Command::Segment(a) => segment(a),
        Command::Selftest { seed } => selftest(seed),
    }
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let manifest = match a.kind {
        Kind::So3 => {
            let sample = match a.mode {
                Mode::Noiseless => sample_utm_noiseless(&SamplingConfig::noiseless(a.nb, a.nf, a.seed))?,
                Mode::Empirical => sample_utm_empirical(&SamplingConfig::empirical(a.nb, a.nf, a.seed))?.sample,
            };
            DatasetManifest::from_sample(&sample)
        }
        Kind::Circle => circle_manifest(&CircleBundleConfig {
            n_fibres: a.nb,
            n_points: a.nf,
            seed: a.seed,
            ..Default::default()
        })?,
    };
    manifest.write(&a.out)?;
    eprintln!("wrote {} fibres to {}", manifest.fibres.len(), a.out.display());
    Ok(())
}

fn circle_manifest(cfg: &CircleBundleConfig) -> CliResult<DatasetManifest> {
    let b = circle_bundle(cfg)?;
    let n = b.sizes.len();
    let fibres = b
        .angles
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            FibreEntry {
                id: j.to_string(),
                base: Some(vec![t.cos(), t.sin()]),
                points: a.iter().map(|x| vec![x.cos(), x.sin()]).collect(),
            }
        })
        .collect();
    let blocks = b
        .blocks
        .iter()
        .map(|blk| BlockEntry {
            i: blk.i,
            j: blk.j,
            triplets: blk.entries.clone(),
            base_dist: blk.base_dist,
        })
        .collect();
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        fibres,
        blocks,
        base_edges: None,
    })
}

/// `W` for a dataset: from its correspondence blocks if it has any,
/// otherwise as a sample of the unit tangent bundle of S².
fn load_w(path: &Path, k: &KernelArgs) -> CliResult<HorizontalDiffusionMatrix> {
    let m = DatasetManifest::read(path)?;
    if !m.blocks.is_empty() {
        let kb = k.kb.unwrap_or(m.fibres.len() - 1);
        return Ok(m.build_w(kb, k.eps.unwrap_or(1.0))?);
    }
    let sample = m.to_sample()?;
    let nb = sample.num_fibres();
    let nf = sample.sizes().into_iter().min().unwrap_or(0);
    let mut cfg = So3Config::desk(k.delta.unwrap_or(desk_delta(Regime::Horizontal)));
    cfg.mode = k.mode.into();
    cfg.n_base = nb;
    cfg.n_fibre = nf;
    cfg.eps = k.eps.unwrap_or(DESK_EPS);
    cfg.alpha = k.alpha;
    cfg.k_base = k.kb.unwrap_or(cfg.k_base.min(nb.saturating_sub(1)));
    cfg.k_fibre = k.kf.unwrap_or(cfg.k_fibre.min(nf));
    cfg.eps_pca = (nb as f64).powf(-0.5);
    cfg.k_pca = cfg.k_pca.min(nb.saturating_sub(1));
    Ok(assemble_so3(sample, &cfg)?.w)
}

fn laplacians(w: &HorizontalDiffusionMatrix, k: &KernelArgs) -> CliResult<LaplacianBundle> {
    Ok(laplacians_from_w(w, k.alpha)?)
}

fn build(a: BuildArgs) -> CliResult<()> {
    let w = load_w(&a.input, &a.kernel)?;
    let inv = w.invariants();
    let matrix = if a.normalized {
        laplacians(&w, &a.kernel)?.w
    } else {
        w.matrix.clone()
    };
    let file = std::fs::File::create(&a.out).map_err(HdmError::from)?;
    matrix.write_triplets(std::io::BufWriter::new(file))?;
    let summary = serde_json::json!({
        "dim": w.dim(),
        "fibres": w.layout.num_blocks(),
        "nnz": matrix.nnz(),
        "components": w.components(),
        "invariants": inv,
    });
    println!("{summary}");
    Ok(())
}

fn eigs(a: EigsArgs) -> CliResult<()> {
    let w = load_w(&a.input, &a.kernel)?;
    let lap = laplacians(&w, &a.kernel)?;
    if a.k == 0 || a.k > w.dim() {
        return Err(usage(format!("--k must be in 1..={}", w.dim())));
    }
    let op = match a.operator {
        Operator::Symmetric => lap.symmetric(),
        Operator::Unnormalized => lap.unnormalized(),
    };
    let mut opts = EigOptions::new(a.k, Which::Smallest);
    opts.seed = a.seed;
    let d = eig_sym(&op, &opts)?;
    io::write_eigs_csv(&a.out, &d)?;
    for v in &d.values {
        println!("{v}");
    }
    Ok(())
}

/// Decomposition of `L_*` with the requested number of pairs.
fn decompose(path: &Path, p: &EmbedParams) -> CliResult<(HorizontalDiffusionMatrix, SpectralDecomposition, usize)> {
    let w = load_w(path, &p.kernel)?;
    let lap = laplacians(&w, &p.kernel)?;
    let k = p.k.unwrap_or_else(|| default_truncation(w.dim()).max(2)).min(w.dim());
    if k < 2 {
        return Err(usage("--k must be at least 2"));
    }
    let mut opts = EigOptions::new(k, Which::Smallest);
    opts.seed = p.seed;
    let d = eig_sym(&lap.symmetric(), &opts)?;
    Ok((w, d, k))
}

fn embed(a: EmbedArgs) -> CliResult<()> {
    let p = &a.params;
    let (w, d, k) = decompose(&a.input, p)?;
    let coords = hdm_coords(&d, &w.layout, p.t, k, p.spectrum)?;
    let features = hbdm_features(&d, &w.layout, p.t, k, p.spectrum)?;
    io::write_embedding_csv(&a.out, &coords)?;
    io::write_features_csv(&a.features, &features)?;
    eprintln!("wrote {} and {}", a.out.display(), a.features.display());
    Ok(())
}

/// `fibre:point`, where the fibre is a dataset id or a position.
fn parse_point(s: &str, w: &HorizontalDiffusionMatrix, ids: &HashMap<&str, usize>) -> CliResult<usize> {
    let (j, s_) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("point `{s}` must be written as fibre:point")))?;
    let j = match ids.get(j.trim()) {
        Some(&j) => j,
        None => j.trim().parse().map_err(|_| usage(format!("unknown fibre in `{s}`")))?,
    };
    let p: usize = s_.trim().parse().map_err(|_| usage(format!("bad point index in `{s}`")))?;
    let layout = &w.layout;
    if j >= layout.num_blocks() || p >= layout.sizes()[j] {
        return Err(usage(format!("point `{s}` is out of range")));
    }
    Ok(layout.offsets()[j] + p)
}

fn dist(a: DistArgs) -> CliResult<()> {
    let p = &a.params;
    let (w, d, k) = decompose(&a.input, p)?;
    let out = match (&a.p, &a.q, a.i, a.j) {
        (Some(x), Some(y), _, _) => {
            let manifest = DatasetManifest::read(&a.input)?;
            let ids = fibre_index(&manifest);
            let (px, py) = (parse_point(x, &w, &ids)?, parse_point(y, &w, &ids)?);
            let coords = hdm_coords(&d, &w.layout, p.t, k, p.spectrum)?;
            serde_json::json!({ "kind": "hdd", "p": x, "q": y, "value": hdd(&coords, px, py)? })
        }
        (_, _, Some(i), Some(j)) => {
            let f = hbdm_features(&d, &w.layout, p.t, k, p.spectrum)?;
            serde_json::json!({ "kind": "hbdd", "i": i, "j": j, "value": hbdd(&f, i, j)? })
        }
        _ => return Err(usage("give either --p and --q, or --i and --j")),
    };
    println!("{out}");
    Ok(())
}

fn so3(a: So3Args) -> CliResult<()> {
    let mut cfg = So3Config::preset(a.preset, a.regime);
    if let Some(v) = a.delta {
        cfg.delta = v;
    }
    if let Some(v) = a.eps {
        cfg.eps = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.nb {
        cfg.n_base = v;
        cfg.eps_pca = (v as f64).powf(-0.5);
        cfg.k_pca = cfg.k_pca.min(v.saturating_sub(1));
    }
    if let Some(v) = a.nf {
        cfg.n_fibre = v;
    }
    if let Some(v) = a.kb {
        cfg.k_base = v;
    }
    if let Some(v) = a.kf {
        cfg.k_fibre = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v.into();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.k {
        cfg.n_eigs = v;
    }
    let report = run_so3_experiment(&cfg)?;
    io::write_report_json(&a.out, &report)?;
    if let Some(path) = &a.gnuplot {
        io::write_gnuplot(path, &report.eigenvalues)?;
    }
    println!(
        "groups {:?} ratios {:.3?} regime {}",
        report.group_sizes,
        &report.ratios[..report.ratios.len().min(3)],
        report.regime_label()
    );
    Ok(())
}

fn segment(a: SegmentArgs) -> CliResult<()> {
    let (w, truth) = if a.benchmark {
        let b = circle_bundle(&CircleBundleConfig {
            n_arcs: a.clusters,
            seed: a.seed,
            ..Default::default()
        })?;
        (b.w, Some(b.truth))
    } else {
        let input = a.input.as_ref().expect("clap enforces --input");
        (load_w(input, &a.kernel)?, None)
    };
    let cfg = SegmentConfig {
        alpha: a.kernel.alpha,
        n_eigs: a.k.unwrap_or(a.clusters.max(2)),
        t: a.t,
        mode: a.spectrum,
        seed: a.seed,
        restarts: a.restarts,
        ..SegmentConfig::new(a.clusters)
    };
    let (_, seg) = segment_bundle(&w, &cfg)?;
    io::write_segmentation_csv(&a.out, &seg)?;
    if let Some(truth) = truth {
        let c = consistency_details(&seg, &truth)?;
        let worst = c.per_fibre.iter().copied().fold(1.0, f64::min);
        println!("{}", serde_json::json!({ "overall": c.overall, "worst_fibre": worst }));
    }
    Ok(())
}

fn selftest(seed: u64) -> CliResult<()> {
    let checks = hdm::selftest::run(seed);
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
