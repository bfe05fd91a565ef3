//! `moco`: batch front end for phantom generation, acquisition simulation,
//! motion correction, quality metrics and the benchmark matrix.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 solver failure.
//! `MOCO_THREADS` overrides the worker thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use moco_core::bench::{run_bench_with_progress, BenchConfig};
use moco_core::forward::zero_filled;
use moco_core::io::{
    load_config, read_kspace, read_pattern, read_volume, write_atomic, write_json, write_kspace, write_pattern,
    write_png_triplet, write_volume, DType, RunManifest,
};
use moco_core::metrics::{compare_volumes, QualityReport, SsimOptions};
use moco_core::nufft::NufftConfig;
use moco_core::optimizer::{run_correction, RegMode, SolverConfig};
use moco_core::pattern::PatternKind;
use moco_core::simulation::{
    make_motion_script, make_phantom, make_sampling_pattern, phantom_preset, simulate_acquisition, PatternSpec,
    PhantomSpec,
};
use moco_core::{MocoError, MotionTrace};

#[derive(Parser)]
#[command(name = "moco", version, about = "Reference-guided rigid motion correction for 3D Cartesian MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write multi-contrast phantom volumes.
    Phantom(PhantomArgs),
    /// Simulate a motion-corrupted acquisition of a volume.
    Simulate(SimulateArgs),
    /// Jointly estimate motion and reconstruct a corrected image.
    Correct(CorrectArgs),
    /// Compare two volumes (PSNR and SSIM on the volume and central slices).
    Metrics(MetricsArgs),
    /// Run the benchmark matrix and print one PASS/FAIL line per criterion.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreType {
    Complex64,
    Complex128,
}

impl From<StoreType> for DType {
    fn from(s: StoreType) -> Self {
        match s {
            StoreType::Complex64 => DType::Complex64,
            StoreType::Complex128 => DType::Complex128,
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    /// Named preset (two-contrast-64, two-contrast-32).
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    preset: Option<String>,
    /// Phantom spec file (JSON or TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "complex64")]
    dtype: StoreType,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Randomized,
    Linear,
}

#[derive(Args)]
struct SimulateArgs {
    /// Ground-truth image volume (.json sidecar or .raw payload).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of pose changes of the random piecewise-constant motion.
    #[arg(long, default_value_t = 1)]
    poses: usize,
    /// `script` (random motion), `identity`, or a trace CSV file.
    #[arg(long, default_value = "script")]
    trace: String,
    #[arg(long, default_value_t = 3.0)]
    max_translation_voxels: f64,
    #[arg(long, default_value_t = 5.0)]
    max_rotation_deg: f64,
    #[arg(long, default_value_t = 1)]
    motion_seed: u64,
    #[arg(long, value_enum, default_value = "randomized")]
    pattern: PatternArg,
    #[arg(long, default_value_t = 2.0)]
    accel: f64,
    /// Seed of the randomized sampling pattern.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    density_power: f64,
    #[arg(long, default_value_t = 0)]
    readout_axis: usize,
    /// Complex Gaussian noise standard deviation per component.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long, value_enum, default_value = "complex64")]
    dtype: StoreType,
}

#[derive(Args)]
struct CorrectArgs {
    /// k-space file written by `simulate` (or any compatible sidecar).
    #[arg(long)]
    kspace: PathBuf,
    /// Optional pattern JSON; must match the pattern embedded in the k-space sidecar.
    #[arg(long)]
    pattern: Option<PathBuf>,
    /// Motion-free reference contrast; required in guided mode.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Solver config (TOML or JSON); unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's regularisation mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RegMode>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "complex64")]
    dtype: StoreType,
}

#[derive(Args)]
struct MetricsArgs {
    /// Volume to assess.
    #[arg(long)]
    input: PathBuf,
    /// Ground truth; its maximum sets the dynamic range.
    #[arg(long)]
    reference: PathBuf,
    /// Append a CSV row to this file (header written when the file is new).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    label: String,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench config (TOML or JSON); unspecified fields take defaults.
    #[arg(long, conflicts_with = "reduced")]
    config: Option<PathBuf>,
    /// Small 32^3 matrix instead of the full one.
    #[arg(long)]
    reduced: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<RegMode, String> {
    s.parse().map_err(|e: MocoError| e.to_string())
}

enum Failure {
    Usage(String),
    Solver(String),
}

impl From<MocoError> for Failure {
    fn from(e: MocoError) -> Self {
        match e {
            MocoError::Divergence(_) | MocoError::Convergence { .. } => Failure::Solver(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn args_vec() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Accepts `name`, `name.json` or `name.raw` and returns the stem path.
fn volume_path(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serialisable config")
}

fn write_trace(path: &Path, trace: &MotionTrace) -> Result<(), MocoError> {
    write_atomic(path, trace.to_csv().as_bytes())
}

fn cmd_phantom(a: PhantomArgs) -> CliResult {
    let start = Instant::now();
    let spec: PhantomSpec = match (&a.preset, &a.spec) {
        (Some(name), _) => phantom_preset(name)?,
        (None, Some(path)) => load_config(path)?,
        (None, None) => return Err(usage("either --preset or --spec is required")),
    };
    let vols = make_phantom(&spec)?;
    let mut m = RunManifest::new("phantom", args_vec());
    if let Some(p) = &a.spec {
        m.inputs.insert("spec".into(), absolute(p));
    }
    for (i, v) in vols.iter().enumerate() {
        let name = format!("contrast_{i}");
        write_volume(&a.out.join(&name), v, a.dtype.into())?;
        m.outputs.insert(format!("{name}_raw"), format!("{name}.raw").into());
        m.outputs.insert(format!("{name}_json"), format!("{name}.json").into());
    }
    m.config = to_json(&spec);
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&a.out.join("manifest.json"))?;
    println!("wrote {} contrasts {:?} to {}", vols.len(), spec.dims, a.out.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let start = Instant::now();
    let truth = read_volume(&volume_path(&a.truth))?;
    let spec = PatternSpec {
        kind: match a.pattern {
            PatternArg::Randomized => PatternKind::Randomized,
            PatternArg::Linear => PatternKind::Linear,
        },
        accel: a.accel,
        readout_axis: a.readout_axis,
        seed: a.seed,
        density_power: a.density_power,
    };
    let pattern = make_sampling_pattern(truth.dims(), truth.voxel_size(), &spec)?;
    let voxel = truth.voxel_size().iter().copied().fold(f64::INFINITY, f64::min);
    let (trace, transitions) = match a.trace.as_str() {
        "identity" => (MotionTrace::identity(pattern.n_lines()), Vec::new()),
        "script" => {
            let s = make_motion_script(
                pattern.n_lines(),
                a.poses,
                a.max_translation_voxels * voxel,
                a.max_rotation_deg,
                a.motion_seed,
            )?;
            (s.trace, s.transitions)
        }
        file => {
            let t = MotionTrace::read_csv(Path::new(file))?;
            t.check_len(pattern.n_lines())?;
            (t, Vec::new())
        }
    };
    let nufft = NufftConfig::default();
    let data = simulate_acquisition(&truth, &trace, &pattern, a.noise, a.noise_seed, &nufft)?;
    let corrupted = zero_filled(&data, &nufft)?;

    let out = &a.out;
    write_kspace(&out.join("kspace"), &data, a.dtype.into())?;
    write_pattern(&out.join("pattern.json"), &pattern)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    write_volume(&out.join("corrupted"), &corrupted, a.dtype.into())?;
    write_json(&out.join("transitions.json"), &transitions)?;

    let mut m = RunManifest::new("simulate", args_vec());
    m.inputs.insert("truth".into(), absolute(&volume_path(&a.truth).with_extension("raw")));
    for (k, f) in [
        ("kspace_raw", "kspace.raw"),
        ("kspace_json", "kspace.json"),
        ("pattern", "pattern.json"),
        ("trace", "trace.csv"),
        ("transitions", "transitions.json"),
        ("corrupted_raw", "corrupted.raw"),
        ("corrupted_json", "corrupted.json"),
    ] {
        m.outputs.insert(k.into(), f.into());
    }
    m.config = json!({
        "pattern": spec,
        "trace": a.trace,
        "poses": a.poses,
        "max_translation_voxels": a.max_translation_voxels,
        "max_rotation_deg": a.max_rotation_deg,
        "noise_sigma": a.noise,
        "nufft": nufft,
    });
    m.seeds = BTreeMap::from([
        ("pattern".into(), a.seed),
        ("motion".into(), a.motion_seed),
        ("noise".into(), a.noise_seed),
    ]);
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&out.join("manifest.json"))?;
    println!(
        "simulated {} lines x {} samples, {} pose changes, into {}",
        pattern.n_lines(),
        pattern.n_readout(),
        transitions.len(),
        out.display()
    );
    Ok(())
}

fn cmd_correct(a: CorrectArgs) -> CliResult {
    let start = Instant::now();
    let mut cfg: SolverConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => SolverConfig::default(),
    };
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if cfg.mode == RegMode::Guided && a.reference.is_none() {
        return Err(usage("guided mode needs --reference (or use --mode plain-tv)"));
    }
    cfg.validate()?;
    let data = read_kspace(&volume_path(&a.kspace))?;
    if let Some(p) = &a.pattern {
        if &read_pattern(p)? != data.pattern() {
            return Err(usage(format!("{} does not match the k-space sidecar's pattern", p.display())));
        }
    }
    let reference = a.reference.as_ref().map(|p| read_volume(&volume_path(p))).transpose()?;

    let out = &a.out;
    let mut m = RunManifest::new("correct", args_vec());
    m.inputs.insert("kspace".into(), absolute(&volume_path(&a.kspace).with_extension("raw")));
    if let Some(p) = &a.reference {
        m.inputs.insert("reference".into(), absolute(&volume_path(p).with_extension("raw")));
    }
    if let Some(p) = &a.pattern {
        m.inputs.insert("pattern".into(), absolute(p));
    }
    m.config = to_json(&cfg);
    m.seeds.insert("solver".into(), cfg.seed);

    let (u, trace, report, failure) = match run_correction(&data, reference.as_ref(), &cfg) {
        Ok(r) => {
            for (i, t) in r.timings.stages.iter().enumerate() {
                m.timings.insert(format!("stage_{i}"), *t);
            }
            (Some(r.u), Some(r.trace), r.report, None)
        }
        Err(f) => {
            let (u, t) = f.last_good.map_or((None, None), |(u, t)| (Some(u), Some(t)));
            (u, t, f.report, Some(f.error))
        }
    };
    // a failed run keeps its best iterate under a distinct name
    let stem = if failure.is_some() { "last_good" } else { "corrected" };
    if let (Some(u), Some(trace)) = (&u, &trace) {
        write_volume(&out.join(stem), u, a.dtype.into())?;
        write_trace(&out.join(format!("{stem}_trace.csv")), trace)?;
        let (pngs, window) = write_png_triplet(out, stem, u)?;
        for p in pngs {
            let name = p.file_name().expect("file name").to_string_lossy().to_string();
            m.outputs.insert(name.trim_end_matches(".png").into(), name.into());
        }
        m.outputs.insert(format!("{stem}_raw"), format!("{stem}.raw").into());
        m.outputs.insert(format!("{stem}_json"), format!("{stem}.json").into());
        m.outputs.insert(format!("{stem}_trace"), format!("{stem}_trace.csv").into());
        m.config = json!({ "solver": cfg, "png_window": window });
    }
    write_json(
        &out.join("report.json"),
        &json!({
            "status": if failure.is_some() { "failed" } else { "ok" },
            "error": failure.as_ref().map(|e| e.to_string()),
            "last_good": failure.is_some() && u.is_some(),
            "solver": report,
        }),
    )?;
    m.outputs.insert("report".into(), "report.json".into());
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&out.join("manifest.json"))?;
    match failure {
        Some(e) => Err(Failure::Solver(format!(
            "{e}{}",
            if u.is_some() { " (last good iterate written as last_good.*)" } else { "" }
        ))),
        None => {
            println!("final misfit {:.6e}, outputs in {}", report.final_misfit, out.display());
            Ok(())
        }
    }
}

fn cmd_metrics(a: MetricsArgs) -> CliResult {
    let x = read_volume(&volume_path(&a.input))?;
    let r = read_volume(&volume_path(&a.reference))?;
    if x.dims() != r.dims() {
        return Err(usage(format!("shape mismatch: {:?} vs {:?}", x.dims(), r.dims())));
    }
    let q = compare_volumes(&x, &r, &SsimOptions::default())?;
    let text = serde_json::to_string_pretty(&q).expect("serialisable report");
    println!("{text}");
    if let Some(p) = &a.out {
        write_json(p, &q)?;
    }
    if let Some(p) = &a.csv {
        let mut body = if p.exists() {
            std::fs::read_to_string(p).map_err(MocoError::from)?
        } else {
            format!("{}\n", QualityReport::CSV_HEADER)
        };
        body.push_str(&q.csv_row(&a.label));
        body.push('\n');
        write_atomic(p, body.as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let cfg: BenchConfig = match (&a.config, a.reduced) {
        (Some(p), _) => load_config(p)?,
        (None, true) => BenchConfig::reduced(),
        (None, false) => BenchConfig::default(),
    };
    cfg.solver.validate()?;
    let (report, timings) = run_bench_with_progress(&cfg, |msg| eprintln!("{msg}"))?;
    for c in &report.criteria {
        println!("{} {} {}: {}", c.id, if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write_json(&a.out.join("bench_report.json"), &report)?;
    write_json(&a.out.join("bench_timings.json"), &timings)?;
    let mut m = RunManifest::new("bench", args_vec());
    if let Some(p) = &a.config {
        m.inputs.insert("config".into(), absolute(p));
    }
    m.outputs.insert("report".into(), "bench_report.json".into());
    m.outputs.insert("timings".into(), "bench_timings.json".into());
    m.config = to_json(&cfg);
    m.seeds = BTreeMap::from([
        ("motion".into(), cfg.motion_seed),
        ("pattern".into(), cfg.pattern.seed),
        ("noise".into(), cfg.noise_seed),
        ("solver".into(), cfg.solver.seed),
    ]);
    m.timings.insert("total".into(), timings.total);
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("MOCO_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("MOCO_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(usage("MOCO_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Bench(a) => cmd_bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(3)
        }
    }
}
