//! `rgflow`: batch front end for the flow solver.
//!
//! Exit codes: 0 success, 1 certificate failure, 2 configuration error,
//! 3 solver or gate error, 4 ball exit during the homotopy.

mod commands;
mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use rgflow::FlowError;

use crate::commands::Outcome;
use crate::config::{Overrides, RunConfig};
use crate::output::{to_value, Artifacts};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(FlowError),
    Io(String),
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidParameters(m) | FlowError::InvalidInput(m) => CliError::Config(m),
            e => CliError::Solver(e),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(FlowError::BallExit { .. }) => 4,
            CliError::Solver(_) | CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config error: {m}"),
            CliError::Solver(e) => format!("solver error: {e}"),
            CliError::Io(m) => format!("io error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rgflow", version, about = "Flows near a non-hyperbolic fixed point with mixed boundary conditions")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for output files (config key `output.dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Run seed (config key `seed`); beats `RGFLOW_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Initial coupling (config key `g0`).
    #[arg(long, global = true)]
    g0: Option<f64>,

    /// Horizon of the truncated problem (config key `quadratic.horizon`).
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Worker threads for sweep points; all other subcommands use one.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the quadratic boundary-value problem.
    Quadratic,
    /// Construct the perturbed flow by homotopy.
    Flow {
        /// Skip the assumption checks on the coefficients.
        #[arg(long)]
        force: bool,
    },
    /// Run the verification suite.
    Verify {
        /// Run only the named check (config key `verify.only`).
        #[arg(long)]
        only: Option<String>,
        /// List the available checks and exit.
        #[arg(long)]
        list: bool,
    },
    /// Solve over a grid of `g0` or of `beta` scalings.
    Sweep,
    /// Compare homotopy, shooting and sweep solutions on one instance.
    OracleCompare,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            println!("{}", o.summary);
            ExitCode::from(if o.pass { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("rgflow: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome, CliError> {
    if let Command::Verify { list: true, .. } = cli.command {
        return Ok(Outcome {
            pass: true,
            summary: verify::names().join("\n"),
        });
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let (force, only) = match &cli.command {
        Command::Flow { force } => (*force, None),
        Command::Verify { only, .. } => (false, only.clone()),
        _ => (false, None),
    };
    cfg.apply(&Overrides {
        g0: cli.g0,
        horizon: cli.horizon,
        seed: cli.seed,
        env_seed: std::env::var("RGFLOW_SEED").ok(),
        out_dir: cli.out_dir.clone(),
        only,
        force,
    })?;
    cfg.validate()?;
    if cli.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let threads = match cli.command {
        Command::Sweep => cli.jobs.unwrap_or(0),
        _ => 1,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Quadratic => commands::cmd_quadratic(&cfg),
        Command::Flow { .. } => commands::cmd_flow(&cfg),
        Command::Verify { .. } => cmd_verify(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::OracleCompare => commands::cmd_oracle(&cfg),
    })
}

fn cmd_verify(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let checks = verify::run(cfg.verify.only.as_deref(), cfg.seed).map_err(CliError::Config)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.ok()).map(|c| c.name).collect();
    let expected = checks.iter().filter(|c| c.status == verify::Status::ExpectedFail).count();
    let pass = failed.is_empty();
    let mut art = Artifacts::new(&cfg.output.dir);
    art.add_json(
        "verify.json",
        "verify",
        cfg.seed,
        json!({
            "checks": to_value(&checks)?,
            "total": checks.len(),
            "failed": failed,
            "expected_failures": expected,
            "pass": pass,
        }),
    )?;
    art.commit()?;
    for c in &checks {
        let m = c.measured.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "-".into());
        println!("{:<16} {:<36} {m} (tol {:.1e})", format!("{:?}", c.status), c.name, c.tolerance);
    }
    if !pass {
        eprintln!("rgflow: failed checks: {}", failed.join(", "));
    }
    Ok(Outcome {
        pass,
        summary: format!(
            "verify: {} checks, {} failed, {} expected failures",
            checks.len(),
            failed.len(),
            expected
        ),
    })
}
