//! `csi3d`: run the inversion pipeline stage by stage or end to end.
//!
//! Stage commands share a working directory (`<out>/<scenario name>` unless
//! `--workdir` is given):
//!
//! | stage             | reads                  | writes                                             |
//! |-------------------|------------------------|----------------------------------------------------|
//! | `forward`         |                        | `data_clean.bin`, `data.bin`, `forward.toml`       |
//! | `build-phi`       |                        | `<cache>/phi-<key>.bin`, `<cache>/phi-<key>.toml`  |
//! | `invert-sources`  | `data.bin`             | `sources.bin`, `mmv_trace.csv`, `invert-sources.toml` |
//! | `invert-contrast` | `data.bin`, `sources.bin` | `report/`                                       |
//!
//! Every artifact is listed with its SHA-256 in `manifest.sha256`; later
//! stages refuse inputs whose contents changed.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use csi_core::harness::{self, RunOptions, RunReport, Scenario};
use csi_core::io::{self, MatrixHeader};
use csi_core::mmv::ContrastSourceMatrix;
use csi_core::CsiError;
use ndarray::Array2;
use num_complex::Complex64;
use sha2::{Digest, Sha256};

const MANIFEST: &str = "manifest.sha256";

#[derive(Parser)]
#[command(name = "csi3d", version, about = "Linearized 3-D electromagnetic contrast source inversion")]
struct Cli {
    /// Worker threads for the forward solves (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize noisy scattered-field data on the refined truth grid.
    Forward(StageArgs),
    /// Build the scattering matrix, or load it from the cache.
    BuildPhi(StageArgs),
    /// Estimate the contrast sources from the data.
    InvertSources(StageArgs),
    /// Reconstruct the contrast from the estimated sources.
    InvertContrast(StageArgs),
    /// Run every stage and write a new report directory.
    RunScenario(StageArgs),
    /// Convert a binary matrix file to CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root.
    #[arg(long, env = "CSI3D_OUTPUT_ROOT", default_value = "runs")]
    out: PathBuf,
    /// Stage directory (default: <out>/<scenario name>). For run-scenario,
    /// the report directory (default: <out>/<scenario name>-run).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Scattering-matrix cache (default: <out>/cache).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Noise fraction.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    mmv_iters: Option<usize>,
    #[arg(long)]
    contrast_iters: Option<usize>,
    /// Scale the assumed background permittivity.
    #[arg(long)]
    background_factor: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    /// Binary matrix file.
    input: PathBuf,
    /// Destination (default: the input with a .csv extension).
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failures, each with its own exit status.
enum Failure {
    Config(String),
    MissingArtifact { path: PathBuf, hint: &'static str },
    BadArtifact(String),
    Stage(CsiError),
    Exists(PathBuf),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 3,
            Failure::MissingArtifact { .. } | Failure::BadArtifact(_) => 4,
            Failure::Stage(_) => 5,
            Failure::Exists(_) => 6,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Other(_) => "io",
            Failure::Config(_) => "config",
            Failure::MissingArtifact { .. } => "missing-artifact",
            Failure::BadArtifact(_) => "bad-artifact",
            Failure::Stage(_) => "stage",
            Failure::Exists(_) => "output-exists",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::BadArtifact(m) | Failure::Other(m) => f.write_str(m),
            Failure::MissingArtifact { path, hint } => write!(f, "missing input artifact {} ({hint})", path.display()),
            Failure::Stage(e) => write!(f, "{e}"),
            Failure::Exists(p) => write!(f, "{} already exists; refusing to overwrite", p.display()),
        }
    }
}

impl From<CsiError> for Failure {
    fn from(e: CsiError) -> Self {
        match e {
            CsiError::Config(m) => Failure::Config(m),
            CsiError::BadFile(m) => Failure::BadArtifact(m),
            CsiError::Io(e) => Failure::Other(e.to_string()),
            e => Failure::Stage(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let start = Instant::now();
    match run(cli) {
        Ok(()) => {
            eprintln!("done in {:.2} s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error[{}]: {f}", f.kind());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    match cli.command {
        Command::Forward(a) => forward(&Stage::new(a)?),
        Command::BuildPhi(a) => build_phi(&Stage::new(a)?),
        Command::InvertSources(a) => invert_sources(&Stage::new(a)?),
        Command::InvertContrast(a) => invert_contrast(&Stage::new(a)?),
        Command::RunScenario(a) => run_scenario(&Stage::new(a)?),
        Command::Export(a) => export(&a),
    }
}

/// A resolved stage invocation.
struct Stage {
    scenario: Scenario,
    workdir: PathBuf,
    explicit_workdir: bool,
    out: PathBuf,
    cache: PathBuf,
}

impl Stage {
    fn new(a: StageArgs) -> Outcome<Stage> {
        if !a.config.exists() {
            return Err(Failure::Config(format!("config file {} not found", a.config.display())));
        }
        let mut s = Scenario::load(&a.config)?;
        let o = a.overrides;
        if let Some(v) = o.seed {
            s.seed = v;
        }
        if let Some(v) = o.noise {
            s.noise = v;
        }
        if let Some(v) = o.mmv_iters {
            s.mmv.max_iter = v;
        }
        if let Some(v) = o.contrast_iters {
            s.contrast.iterations = v;
        }
        if let Some(v) = o.background_factor {
            s.mismatch.background_factor = Some(v);
        }
        s.validate()?;
        Ok(Stage {
            explicit_workdir: a.workdir.is_some(),
            workdir: a.workdir.unwrap_or_else(|| a.out.join(&s.name)),
            cache: a.cache.unwrap_or_else(|| a.out.join("cache")),
            out: a.out,
            scenario: s,
        })
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            phi_cache: Some(self.cache.clone()),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn header(&self, key: String) -> MatrixHeader {
        MatrixHeader {
            omega: self.scenario.grid.omega(),
            tol: self.scenario.solver.inversion_tol,
            key,
        }
    }

    fn snapshot(&self, name: &str) -> Outcome<()> {
        write_new(&self.path(name), self.scenario.to_toml()?.as_bytes())?;
        record(&self.workdir, name)
    }

    /// Fails unless `name` exists and matches its manifest entry.
    fn require(&self, name: &str, hint: &'static str) -> Outcome<PathBuf> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Failure::MissingArtifact { path, hint });
        }
        verify(&self.workdir, name)?;
        Ok(path)
    }

    fn refuse_existing(&self, names: &[&str]) -> Outcome<()> {
        for n in names {
            let p = self.path(n);
            if p.exists() {
                return Err(Failure::Exists(p));
            }
        }
        Ok(())
    }
}

fn forward(st: &Stage) -> Outcome<()> {
    let s = &st.scenario;
    st.refuse_existing(&["data_clean.bin", "data.bin", "forward.toml"])?;
    fs::create_dir_all(&st.workdir)?;
    eprintln!("forward: synthesizing data for '{}'", s.name);
    let t = Instant::now();
    let clean = harness::synthesize_data(s).map_err(|e| e.at_stage("synthesize"))?;
    eprintln!("forward: synthesize {:.2} s", t.elapsed().as_secs_f64());
    let noisy = harness::add_noise(&clean, s.noise, s.seed, s.noise_mode);
    let key = digest(s.to_toml()?.as_bytes());
    write_matrix_new(&st.path("data_clean.bin"), &st.header(key.clone()), &clean)?;
    record(&st.workdir, "data_clean.bin")?;
    write_matrix_new(&st.path("data.bin"), &st.header(key), &noisy)?;
    record(&st.workdir, "data.bin")?;
    st.snapshot("forward.toml")?;
    println!("{}", st.workdir.display());
    Ok(())
}

fn build_phi(st: &Stage) -> Outcome<()> {
    let t = Instant::now();
    let (phi, loaded) = harness::build_phi(&st.scenario, Some(&st.cache))?;
    let path = st.cache.join(format!("phi-{}.bin", phi.key));
    if loaded {
        eprintln!("build-phi: loaded cached scattering matrix {}", path.display());
    } else {
        eprintln!(
            "build-phi: built {} x {} scattering matrix in {:.2} s",
            phi.rows(),
            phi.cols(),
            t.elapsed().as_secs_f64()
        );
    }
    let snapshot = st.cache.join(format!("phi-{}.toml", phi.key));
    if !snapshot.exists() {
        fs::write(&snapshot, st.scenario.to_toml()?)?;
    }
    println!("{}", path.display());
    Ok(())
}

fn invert_sources(st: &Stage) -> Outcome<()> {
    let data_path = st.require("data.bin", "run forward first")?;
    st.refuse_existing(&["sources.bin", "mmv_trace.csv", "invert-sources.toml"])?;
    let (_, data) = io::read_matrix(&data_path)?;
    let setup = harness::prepare_inversion(&st.scenario, &st.options())?;
    let mut timings = setup.timings.clone();
    let (j_hat, trace) = harness::estimate_sources(&st.scenario, &setup, &data, &mut timings)?;
    report_timings(&timings);
    let best = trace.best();
    eprintln!(
        "invert-sources: best CV residual {:.4e} at iteration {} ({:?})",
        best.gamma_cv, best.iter, trace.stop
    );
    write_matrix_new(&st.path("sources.bin"), &st.header(setup.phi.key.clone()), &j_hat.data)?;
    record(&st.workdir, "sources.bin")?;
    trace.write_csv(&st.path("mmv_trace.csv"))?;
    record(&st.workdir, "mmv_trace.csv")?;
    st.snapshot("invert-sources.toml")?;
    println!("{}", st.workdir.display());
    Ok(())
}

fn invert_contrast(st: &Stage) -> Outcome<()> {
    let data_path = st.require("data.bin", "run forward first")?;
    let sources_path = st.require("sources.bin", "run invert-sources first")?;
    let report_dir = st.path("report");
    if report_dir.exists() {
        return Err(Failure::Exists(report_dir));
    }
    let (_, data) = io::read_matrix(&data_path)?;
    let (header, sources) = io::read_matrix(&sources_path)?;
    let setup = harness::prepare_inversion(&st.scenario, &st.options())?;
    if header.key != setup.phi.key {
        return Err(Failure::Config(
            "sources.bin was estimated with a different scattering matrix than this configuration gives".into(),
        ));
    }
    let j_hat = ContrastSourceMatrix::new(sources)?;
    let mut timings = setup.timings.clone();
    let (chi, history) = harness::reconstruct_contrast(&st.scenario, &setup, &data, &j_hat, &mut timings)?;
    report_timings(&timings);
    let report = RunReport::assemble(&st.scenario, &setup, &data, j_hat, None, chi, history, timings);
    report.write(&report_dir)?;
    log_metrics(&report);
    println!("{}", report_dir.display());
    Ok(())
}

fn run_scenario(st: &Stage) -> Outcome<()> {
    let base = if st.explicit_workdir {
        st.workdir.clone()
    } else {
        st.out.join(format!("{}-run", st.scenario.name))
    };
    let dir = harness::fresh_directory(&base);
    let report = harness::run_scenario(&st.scenario, &st.options())?;
    report_timings(&report.timings);
    report.write(&dir)?;
    log_metrics(&report);
    println!("{}", dir.display());
    Ok(())
}

fn export(a: &ExportArgs) -> Outcome<()> {
    if !a.input.is_file() {
        return Err(Failure::MissingArtifact {
            path: a.input.clone(),
            hint: "no such matrix file",
        });
    }
    let out = a.output.clone().unwrap_or_else(|| a.input.with_extension("csv"));
    if out.exists() {
        return Err(Failure::Exists(out));
    }
    let (_, m) = io::read_matrix(&a.input)?;
    io::write_matrix_csv(&out, &m)?;
    println!("{}", out.display());
    Ok(())
}

fn report_timings(timings: &[(&str, f64)]) {
    for (stage, secs) in timings {
        eprintln!("timing: {stage} {secs:.2} s");
    }
}

fn log_metrics(r: &RunReport) {
    let m = &r.metrics;
    eprintln!(
        "metrics: centroid error {:.3} cells, support overlap {:.3}, {} support cells, positive support {}, constraints hold {}",
        m.centroid_error, m.support_overlap, m.support_cells, m.positive_support, m.constraints_hold
    );
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_new(path: &Path, bytes: &[u8]) -> Outcome<()> {
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Failure::Exists(path.to_path_buf())
        } else {
            e.into()
        }
    })?;
    f.write_all(bytes)?;
    Ok(())
}

fn write_matrix_new(path: &Path, header: &MatrixHeader, m: &Array2<Complex64>) -> Outcome<()> {
    if path.exists() {
        return Err(Failure::Exists(path.to_path_buf()));
    }
    io::write_matrix(path, header, m)?;
    Ok(())
}

fn manifest_entries(dir: &Path) -> Outcome<Vec<(String, String)>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, n)| (h.to_string(), n.to_string()))
        .collect())
}

fn record(dir: &Path, name: &str) -> Outcome<()> {
    let hash = digest(&fs::read(dir.join(name))?);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(MANIFEST))?;
    writeln!(f, "{hash}  {name}")?;
    Ok(())
}

fn verify(dir: &Path, name: &str) -> Outcome<()> {
    let Some((expected, _)) = manifest_entries(dir)?.into_iter().rev().find(|(_, n)| n == name) else {
        return Ok(());
    };
    if digest(&fs::read(dir.join(name))?) != expected {
        return Err(Failure::BadArtifact(format!(
            "{} changed since it was written (hash mismatch with {MANIFEST})",
            dir.join(name).display()
        )));
    }
    Ok(())
}
