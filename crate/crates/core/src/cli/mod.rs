//! Command-line front end: manifests, tensor files, and the `attend`, `sweep`,
//! `simulate` and `advise` commands.

mod commands;
pub mod manifest;
pub mod synth;
pub mod tensor_file;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::error::Error;
use crate::sim::DoubleBufferMode;
use crate::tensor::SoftmaxMode;

pub use commands::{
    advise, attend, calibrate_alpha1, simulate, sweep, sweep_csv, AdviseReport, AttendReport, Calibration,
    Prediction, SimulateReport, SweepRow, SWEEP_COLUMNS,
};
pub use manifest::RunManifest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 2 for invalid input, 3 for a simulated resource violation, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Resource(_) => 3,
            Self::Io(_) => 4,
        }
    }

    pub(crate) fn from_tensor_file(path: &Path, e: tensor_file::TensorFileError) -> Self {
        match e {
            tensor_file::TensorFileError::Io(io) => Self::Io(format!("{}: {io}", path.display())),
            other => Self::Validation(format!("{}: {other}", path.display())),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::BufferOverflow { .. } => Self::Resource(e.to_string()),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "energon", version, about = "Multi-round filtered sparse attention and accelerator model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run filtered attention and report pruning, coverage and deviation from dense.
    Attend(RunArgs),
    /// Evaluate a grid of (alpha0, alpha1) pairs.
    Sweep(SweepArgs),
    /// Cycle-level simulation with the analytical prediction alongside.
    Simulate(SimulateArgs),
    /// Analytical load/compute estimate and buffering advice.
    Advise(AdviseArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to the manifest's `outputs.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the synthetic workload seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub softmax: Option<SoftmaxMode>,
    /// Hardware preset name or path to a config JSON.
    #[arg(long)]
    pub hw: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub odf: Option<Switch>,
    #[arg(long = "double-buffer")]
    pub double_buffer: Option<DoubleBufferMode>,
}

#[derive(Debug, Args)]
pub struct AdviseArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub l: usize,
    #[arg(long)]
    pub d: usize,
    /// DRAM bandwidth in bytes per cycle.
    #[arg(long)]
    pub bandwidth: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long, default_value_t = crate::perf::DEFAULT_GATING_THRESHOLD)]
    pub threshold: f64,
    /// Also write the JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Prepared {
    manifest: RunManifest,
    base: PathBuf,
    out: PathBuf,
}

fn prepare(args: &RunArgs) -> Result<Prepared, CliError> {
    let (mut manifest, base) = RunManifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        match &mut manifest.workload {
            manifest::WorkloadSpec::Synthetic(s) => s.seed = seed,
            manifest::WorkloadSpec::Tensors(_) => {
                return Err(CliError::Validation("--seed applies only to synthetic workloads".into()))
            }
        }
    }
    if let Some(mode) = args.softmax {
        manifest.softmax = mode;
    }
    if let Some(hw) = &args.hw {
        manifest.hardware = Some(manifest::HardwareRef::Named(hw.clone()));
    }
    let out = match (&args.out, &manifest.outputs) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(&o.dir),
        (None, None) => return Err(CliError::Validation("no output directory: pass --out".into())),
    };
    Ok(Prepared { manifest, base, out })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Attend(args) => {
            let p = prepare(&args)?;
            let report = attend(&p.manifest, &p.base, &p.out)?;
            println!(
                "pruning {:.3}x, max deviation {:.3e}; wrote {}",
                report.overall_pruning_ratio,
                report.max_abs_deviation,
                p.out.display()
            );
        }
        Command::Sweep(args) => {
            let p = prepare(&args.run)?;
            let rows = sweep(&p.manifest, &p.base, &p.out, args.jobs)?;
            println!("{} sweep rows; wrote {}", rows.len(), p.out.display());
        }
        Command::Simulate(args) => {
            let p = prepare(&args.run)?;
            let odf = args.odf.map(|s| s == Switch::On);
            let report = simulate(&p.manifest, &p.base, &p.out, odf, args.double_buffer)?;
            println!(
                "{} cycles, agreement {:.1}%; wrote {}",
                report.report.total_cycles,
                report.agreement_pct,
                p.out.display()
            );
        }
        Command::Advise(a) => {
            let inputs = crate::perf::PerfInputs {
                n: a.n,
                l: a.l,
                d: a.d,
                bandwidth: a.bandwidth,
                beta: a.beta,
                gamma: a.gamma,
                m: a.m,
                p: a.p,
            };
            let report = advise(&inputs, a.threshold)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(out) = &a.out {
                write_atomic(out, text.as_bytes())?;
            }
            println!("{text}");
        }
    }
    Ok(())
}
