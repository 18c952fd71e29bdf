use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nested_is::experiments::ExperimentKind;
use nested_is::io::{parse_config_for, replay, run, RunOptions};
use nested_is::Error;

/// Nested importance sampling experiments.
///
/// Exit status: 0 when every pass/fail flag holds, 1 when a flag fails,
/// 2 on usage or config errors, 3 when the computation itself fails.
#[derive(Parser)]
#[command(name = "nested-is", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Error against N at fixed M and d_z, with the log-log slope.
    SweepN(RunArgs),
    /// Error against M at fixed N and d_z.
    SweepM(RunArgs),
    /// Error and certificates across d_z.
    SweepDz(RunArgs),
    /// N sweep with a fresh observation per replication.
    RandomObs(RunArgs),
    /// Bound certificates and K2 constants across d_z.
    Bounds(RunArgs),
    /// Oracle cross-checks.
    Validate(RunArgs),
    /// General sampler against the standard one.
    Equivalence(RunArgs),
    /// Re-runs a recorded job and compares its CSV output byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (default: `replay/` next to the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Validation(_) | Error::Io(_) => 2,
        _ => 3,
    }
}

fn run_job(kind: ExperimentKind, args: RunArgs) -> Result<bool, Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Io(format!("cannot read config {}: {e}", args.config.display())))?;
    let config = parse_config_for(&text, kind)?;
    let opts = RunOptions { out_dir: args.out, seed: args.seed, threads: args.threads };
    let outcome = run(kind, &config, &opts)?;
    for f in &outcome.report.flags {
        println!("{} {}  {}", if f.passed { "PASS" } else { "FAIL" }, f.name, f.detail);
    }
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(outcome.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SweepN(a) => run_job(ExperimentKind::SweepN, a),
        Command::SweepM(a) => run_job(ExperimentKind::SweepM, a),
        Command::SweepDz(a) => run_job(ExperimentKind::SweepDz, a),
        Command::RandomObs(a) => run_job(ExperimentKind::RandomObs, a),
        Command::Bounds(a) => run_job(ExperimentKind::Bounds, a),
        Command::Validate(a) => run_job(ExperimentKind::Validate, a),
        Command::Equivalence(a) => run_job(ExperimentKind::Equivalence, a),
        Command::Replay { manifest, out, threads } => {
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(std::path::Path::new(".")).join("replay"));
            replay(&manifest, &out, threads).map(|(outcome, differing)| {
                for f in &differing {
                    println!("DIFFERS {f}");
                }
                if differing.is_empty() {
                    println!("all CSV outputs reproduced byte for byte");
                }
                differing.is_empty() && outcome.all_passed()
            })
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
