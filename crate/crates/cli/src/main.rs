//! `posoc` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 invariant failure.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};
use posoc::experiments::{self, ExperimentOutput};
use posoc::parallel::init_threads;
use posoc::pmp::PolicyPair;
use posoc::regression::ValueAnsatz;
use posoc::scenario::{Overrides, Resolved, Scenario};
use posoc::{Error, Execution, Result};

#[derive(Parser, Debug)]
#[command(name = "posoc", version, about = "Particle solver for partially observed stochastic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario JSON file (for `oracle`: an instance file or a directory of them).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the training seed; the evaluation seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy on the scenario's observation schedule.
    Train(Common),
    /// Evaluate a stored policy by Monte Carlo.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy JSON; defaults to `<out>/policy.json`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Separation benchmark, full-information value and trained policy per observation count.
    Table1(Common),
    /// Adaptive noise level against fixed levels.
    NoiseStudy(Common),
    /// Trained policy against zero control on an obstacle scenario.
    Obstacle(Common),
    /// Exact finite-chain oracle and identity checks.
    Oracle(Common),
    /// Write the coefficients of a trained ansatz as CSV.
    ExportAnsatz {
        #[command(flatten)]
        common: Common,
        /// Ansatz JSON; defaults to `<out>/ansatz.json`.
        #[arg(long)]
        ansatz: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Table1(c) | Command::NoiseStudy(c) | Command::Obstacle(c) | Command::Oracle(c) => c,
            Command::Evaluate { common, .. } | Command::ExportAnsatz { common, .. } => common,
        }
    }
}

/// Log sink writing to both stderr and the run log.
#[derive(Clone)]
struct Tee(Arc<Mutex<File>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

fn init_logging(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let file = File::create(out.join("run.log"))?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(Arc::new(Mutex::new(file))))))
        .init();
    Ok(())
}

fn require_path(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| Error::Config(format!("--{what} is required")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn resolve(c: &Common) -> Result<Resolved> {
    let path = require_path(&c.scenario, "scenario")?;
    let s = Scenario::load(&path)?.with_overrides(Overrides { seed: c.seed });
    log::info!("scenario {} ({}), config hash {}", s.id, path.display(), s.config_hash());
    s.resolve()
}

fn execute(cmd: &Command, exec: Execution) -> Result<ExperimentOutput> {
    match cmd {
        Command::Train(c) => Ok(experiments::run_train(&resolve(c)?, exec)?.0),
        Command::Evaluate { common, policy } => {
            let r = resolve(common)?;
            let path = require_path(&Some(policy.clone().unwrap_or_else(|| common.out.join("policy.json"))), "policy")?;
            let policy = PolicyPair::from_json(&std::fs::read_to_string(&path)?)?;
            experiments::run_evaluate(&r, &policy, exec)
        }
        Command::Table1(c) => experiments::run_table1(&resolve(c)?, exec),
        Command::NoiseStudy(c) => experiments::run_noise_study(&resolve(c)?, exec),
        Command::Obstacle(c) => experiments::run_obstacle(&resolve(c)?, exec),
        Command::Oracle(c) => experiments::run_oracle_suite(&require_path(&c.scenario, "scenario")?),
        Command::ExportAnsatz { common, ansatz } => {
            let path = require_path(&Some(ansatz.clone().unwrap_or_else(|| common.out.join("ansatz.json"))), "ansatz")?;
            Ok(experiments::run_export_ansatz(&ValueAnsatz::load(&path)?))
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let common = cli.command.common().clone();
    init_logging(&common.out)?;
    if common.threads > 0 {
        init_threads(common.threads);
    }
    let out = execute(&cli.command, Execution::Parallel)?;
    out.write(&common.out)?;
    log::info!("outputs written to {}", common.out.display());
    let failures = out.hard_failures();
    if failures.is_empty() {
        Ok(0)
    } else {
        for f in &failures {
            log::error!("invariant failed: {}: {}", f.name, f.detail);
        }
        Ok(3)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            if log::log_enabled!(log::Level::Error) {
                log::error!("{e}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
