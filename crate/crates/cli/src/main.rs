use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use qnac::config::{EnvConfig, ExperimentConfig};
use qnac::experiment::{run_experiment, write_oracle_csv};
use qnac::oracle::{closed_form_j, lqr_optimum};
use qnac::report::plot_dir;
use qnac::{Mat, RunStatus};

/// Quasi-Newton actor-critic experiments.
#[derive(Debug, Parser)]
#[command(name = "qnac", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (method, seed) pair of a config and write CSV logs and plots.
    Run {
        config: PathBuf,
        /// Number of (method, seed) runs executed concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        jobs: u64,
        /// Parse and validate the config, print it, and exit.
        #[arg(long)]
        validate_only: bool,
    },
    /// Print the Riccati optimum of an LQR config and write `oracle.csv`.
    Oracle { config: PathBuf },
    /// Regenerate the plots of an output directory from its CSV logs.
    Plot { dir: PathBuf },
}

fn format_matrix(m: &Mat) -> String {
    m.row_iter()
        .map(|r| {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:>14.8}")).collect();
            format!("  [{}]", cells.join(" "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    if !path.exists() {
        bail!("config file not found: {}", path.display());
    }
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn run(config: PathBuf, jobs: u64, validate_only: bool) -> anyhow::Result<bool> {
    let cfg = load(&config)?;
    println!("{}", cfg.echo());
    if validate_only {
        println!("config is valid");
        return Ok(true);
    }
    let summary = run_experiment(&cfg, jobs as usize)?;
    for r in &summary.runs {
        let last = r.outcome.records.last();
        let dist = last
            .and_then(|x| x.dist_to_opt)
            .map_or_else(|| "-".to_string(), |d| format!("{d:.4e}"));
        let j = last.map_or_else(|| "-".to_string(), |x| format!("{:.6e}", x.j_hat));
        let status = match &r.outcome.status {
            RunStatus::Converged { iteration } => format!("converged at iteration {iteration}"),
            RunStatus::BudgetExhausted => "iteration budget used".to_string(),
            RunStatus::Failed { iteration, reason } => format!("FAILED at iteration {iteration}: {reason}"),
        };
        println!(
            "{:<13} seed {:<4} iterations {:>3}  J_hat {j}  dist_to_opt {dist}  {status}",
            r.method.name(),
            r.seed,
            r.outcome.records.len(),
        );
    }
    for p in &summary.plots {
        println!("wrote {}", p.display());
    }
    let failed = summary.failures().count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; partial logs kept in {}", summary.output_dir.display());
        return Ok(false);
    }
    Ok(true)
}

fn oracle(config: PathBuf) -> anyhow::Result<bool> {
    let cfg = load(&config)?;
    let EnvConfig::Lqr(env) = &cfg.env else {
        bail!("the oracle is only available for env = lqr; the cart-pendulum has no closed-form optimum");
    };
    let sol = lqr_optimum(env).context("Riccati iteration failed")?;
    println!("K* =\n{}", format_matrix(&sol.k_star));
    println!("P =\n{}", format_matrix(&sol.p));
    println!("J* = {:.10}", sol.j_star);
    println!("Bellman residual = {:.3e}", sol.bellman_residual);
    println!("closed-loop spectral radius (sqrt(gamma) scaled) = {:.6}", sol.closed_loop_radius);
    let initial = closed_form_j(env, &cfg.initial_gain);
    match &initial {
        Ok(j0) => println!("J(initial_gain) = {j0:.10}"),
        Err(e) => println!("J(initial_gain) undefined: {e}"),
    }
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join("oracle.csv");
    write_oracle_csv(&path, &sol, initial.ok())?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn plot(dir: PathBuf) -> anyhow::Result<bool> {
    for p in plot_dir(&dir)? {
        println!("wrote {}", p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            jobs,
            validate_only,
        } => run(config, jobs, validate_only),
        Command::Oracle { config } => oracle(config),
        Command::Plot { dir } => plot(dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
