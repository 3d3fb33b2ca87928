//! `dilab`: generate synthetic preference data, train policies, run the
//! verification suites and sweep hyperparameter grids.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 verification failure,
//! 3 numerical abort.

mod config;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dilab::datagen::{build_domain, write_dataset};
use dilab::verify::run_suite;
use dilab::{Error, Suite, VerifyOptions};

use crate::config::LoadedConfig;
use crate::run::{run_training, TrainRequest};
use crate::sweep::{cells, finish, run_cells, Grid};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Clone)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    /// Machine-readable line printed to stdout before the error.
    pub summary: Option<String>,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
            summary: None,
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
            summary: None,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::NonFinite(_) => Failure::numeric(e.to_string()),
            other => Failure::config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dilab", version, about = "Density-ratio imitation losses for preference alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic domain and sample a preference dataset from it.
    Gen {
        config: PathBuf,
        /// Overrides `seed` under [gen].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <output root>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy on a generated dataset.
    Train {
        config: PathBuf,
        /// dil-lsif, dil-ukl, dil-bce, dpo, sft or bt-reward.
        #[arg(long)]
        loss: Option<String>,
        /// Dataset directory (default: `data` under [train], else <output root>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: <output root>/runs/<loss>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification suites.
    Verify {
        /// prop1, dre-recovery, dpo-cpc, gradients, self-norm, bt-stats or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replaces the threshold of every upper-bound check.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train every cell of a loss × lr × seed grid and compare the runs.
    Sweep {
        config: PathBuf,
        /// For example `loss=dil-lsif,dpo;lr=0.01,0.05;seed=0,1,2`.
        #[arg(long)]
        grid: String,
        /// Maximum number of cells trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sweep directory (default: <output root>/sweep).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Some(line) = &f.summary {
                println!("{line}");
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { config, seed, out } => cmd_gen(&LoadedConfig::load(&config)?, seed, out),
        Command::Train { config, loss, data, out } => cmd_train(&LoadedConfig::load(&config)?, loss, data, out),
        Command::Verify { suite, seed, tol } => cmd_verify(&suite, seed, tol),
        Command::Sweep {
            config,
            grid,
            jobs,
            data,
            out,
        } => cmd_sweep(&LoadedConfig::load(&config)?, &grid, jobs, data, out),
    }
}

fn cmd_gen(cfg: &LoadedConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let gen = cfg.gen_config(seed)?;
    let out = out.unwrap_or_else(|| cfg.out_root().join("data"));
    let truth = build_domain::<f64>(&gen)?;
    let (manifest, paths) = write_dataset(&truth, gen.pairs_per_prompt, &out, gen.seed)?;
    println!("{}", paths.manifest.display());
    println!(
        "status=ok prompts={} responses_per_prompt={} triples={} seed={} manifest={}",
        gen.num_prompts,
        gen.responses_per_prompt,
        manifest.num_triples,
        gen.seed,
        paths.manifest.display()
    );
    Ok(())
}

fn train_request(cfg: &LoadedConfig, loss: Option<&str>, data: Option<PathBuf>, out: PathBuf) -> Result<TrainRequest, Failure> {
    Ok(TrainRequest {
        loss: cfg.loss_spec(loss)?,
        optim: cfg.optim_config()?,
        model: cfg.policy_settings(),
        data_dir: cfg.data_dir(data.as_deref()),
        oracle: cfg.file.eval.oracle,
        domain: cfg.file.eval.domain.as_deref().map(|p| cfg.resolve(p)),
        out_dir: out,
    })
}

fn cmd_train(cfg: &LoadedConfig, loss: Option<String>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let spec = cfg.loss_spec(loss.as_deref())?;
    let out = out.unwrap_or_else(|| cfg.out_root().join("runs").join(spec.name()));
    let req = train_request(cfg, loss.as_deref(), data, out)?;
    let report = run_training(&req)?;
    println!("{}", report.summary_line("ok", &req.loss));
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64, tol: Option<f64>) -> Result<(), Failure> {
    let suites = Suite::parse_selection(suite)?;
    let opts = VerifyOptions { seed, tol };
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s, &opts)?;
        for line in report.check_lines() {
            println!("{line}");
        }
        println!("{}", report.summary_line());
        if !report.pass() {
            failed.push(s.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("verification failed: {}", failed.join(", ")),
            summary: None,
        })
    }
}

fn cmd_sweep(cfg: &LoadedConfig, grid: &str, jobs: usize, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let grid = Grid::parse(grid)?;
    if jobs == 0 {
        return Err(Failure::config("--jobs must be at least 1"));
    }
    let out = out.unwrap_or_else(|| cfg.out_root().join("sweep"));
    let first_loss = grid.loss.first().map(String::as_str);
    let base = train_request(cfg, first_loss, data, out.clone())?;
    let cells = cells(&grid, &base, |name| cfg.loss_spec(name), &out)?;
    let results = run_cells(&cells, jobs);
    for r in results.iter().flatten() {
        let cell = cells.iter().find(|c| c.name == r.name).expect("report names match cells");
        println!("{}", r.summary_line("ok", &cell.request.loss));
    }
    println!("{}", finish(&cells, results, &out)?);
    Ok(())
}
