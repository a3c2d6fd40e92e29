//! `loci-lab`: scenario-driven scans of conjugate and cut loci.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a checked
//! invariant failed (the artifacts are still written).

mod commands;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "loci-lab", version, about = "Conjugate and cut loci of Hamilton-Jacobi characteristics")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "LOCI_LAB_WORKERS")]
    workers: Option<usize>,

    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Args, Debug, Clone)]
struct ScenarioArg {
    /// Scenario file.
    #[arg(value_name = "SCENARIO", conflicts_with = "scenario")]
    file: Option<PathBuf>,

    /// Scenario file (alternative to the positional form).
    #[arg(long)]
    scenario: Option<PathBuf>,
}

impl ScenarioArg {
    fn path(&self) -> Result<PathBuf, Failure> {
        self.file
            .clone()
            .or_else(|| self.scenario.clone())
            .ok_or_else(|| Failure::Usage("a scenario file is required".into()))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the model hypotheses and the scenario settings.
    Validate(ScenarioArg),
    /// Per-ray samples of position, covector, action and s_min.
    Trace {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Mesh indices to trace; all when omitted.
        #[arg(long = "ray")]
        rays: Vec<usize>,
        /// Samples per integrator step.
        #[arg(long, default_value_t = 1)]
        per_step: usize,
    },
    /// First conjugate time of every mesh ray.
    ConjScan(ScenarioArg),
    /// Conjugate and cut times.
    CutScan(ScenarioArg),
    /// Conjugate and cut times with classification of the cut points.
    Loci(ScenarioArg),
    /// Lipschitz and semiconcavity estimates under mesh doubling.
    Regularity(ScenarioArg),
    /// Round-sphere oracle residuals, symplectic invariance and d exp check.
    SphereVerify(ScenarioArg),
    /// Nonfocal domain boundary and its uniform convexity certificate.
    Convexity(ScenarioArg),
    /// Plot-ready data from a loci table or convexity artifact.
    ExportPlotdata {
        /// JSON artifact written by conj-scan, cut-scan, loci or convexity.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(loci_core::Error),
}

impl From<loci_core::Error> for Failure {
    fn from(e: loci_core::Error) -> Self {
        Failure::Config(e)
    }
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Ok,
    Violated(String),
}

fn main() -> ExitCode {
    // `loci-lab run <subcommand> ...` is accepted as well.
    let mut args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    if args.get(1).is_some_and(|a| a == "run") {
        args.remove(1);
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(k) = cli.workers {
        if k == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violated(msg)) => {
            eprintln!("invariant violated: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Outcome, Failure> {
    let ctx = commands::Context {
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Validate(s) => commands::validate(&ctx, &s.path()?),
        Command::Trace { scenario, rays, per_step } => commands::trace(&ctx, &scenario.path()?, rays, *per_step),
        Command::ConjScan(s) => commands::scan(&ctx, &s.path()?, commands::ScanKind::Conj),
        Command::CutScan(s) => commands::scan(&ctx, &s.path()?, commands::ScanKind::Cut),
        Command::Loci(s) => commands::scan(&ctx, &s.path()?, commands::ScanKind::Loci),
        Command::Regularity(s) => commands::regularity(&ctx, &s.path()?),
        Command::SphereVerify(s) => commands::sphere_verify(&ctx, &s.path()?),
        Command::Convexity(s) => commands::convexity(&ctx, &s.path()?),
        Command::ExportPlotdata { input, format } => plot::export(&ctx, input, *format == Format::Json),
    }
}
