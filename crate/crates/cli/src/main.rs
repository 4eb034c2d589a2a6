use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectral_dmri_cli::{compare_files, execute, CliError, Command, CompareArgs, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "spectral-dmri", version, about = "Diffusion MRI signal simulation via Laplace eigenfunctions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `[output] threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Also report the square root of E.
    #[arg(long)]
    rms: bool,
    /// Write the FEM matrices in coordinate text format.
    #[arg(long)]
    dump_matrices: bool,
}

#[derive(Subcommand)]
enum Sub {
    /// Mesh statistics and surface integrals.
    MeshInfo(Common),
    /// Laplace eigendecomposition (cached).
    Eig(Common),
    /// MF, MFGA and BTPDE signals.
    Signal(Common),
    /// Bloch-Torrey eigenmodes in the Laplace basis.
    Btspec(Common),
    /// Short-time ADC approximation.
    Sta(Common),
    /// Full pipeline for every configured method.
    Run(Common),
    /// Relative squared difference E between two signal CSV files.
    Compare {
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Method tag to select from the signals file (MF, MFGA, BTPDE).
        #[arg(long)]
        method: Option<String>,
        /// Method tag to select from the reference file.
        #[arg(long)]
        reference_method: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        rms: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common) = match cli.command {
        Sub::Compare {
            signals,
            reference,
            method,
            reference_method,
            out,
            rms,
        } => {
            let report = compare_files(&CompareArgs {
                signals,
                reference,
                method,
                reference_method,
                out,
                rms,
            })?;
            for c in &report.comparisons {
                println!("{} vs {}: E = {:e}", c.method, c.reference, c.overall_e);
            }
            return Ok(());
        }
        Sub::MeshInfo(c) => (Command::MeshInfo, c),
        Sub::Eig(c) => (Command::Eig, c),
        Sub::Signal(c) => (Command::Signal, c),
        Sub::Btspec(c) => (Command::Btspec, c),
        Sub::Sta(c) => (Command::Sta, c),
        Sub::Run(c) => (Command::Run, c),
    };
    if common.threads == Some(0) {
        return Err(CliError::config("--threads", "must be at least 1"));
    }
    let cfg = RunConfig::load(&common.config)?;
    let out = execute(
        cmd,
        &cfg,
        &Overrides {
            out: common.out,
            threads: common.threads,
            rms: common.rms,
            dump_matrices: common.dump_matrices,
        },
    )?;
    log::info!("outputs written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
