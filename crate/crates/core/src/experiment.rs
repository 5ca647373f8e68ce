//! Running configured experiments and writing their logs.
//!
//! Every `(method, seed)` pair produces `<method>_<seed>.csv` in the output
//! directory. Sampled trajectories of the first and last batch go to
//! `trajectories/`, and the plots are regenerated from those files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::actor::Method;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mdp::{write_trajectories_csv, Trajectory};
use crate::oracle::LqrSolution;
use crate::report::plot_dir;
use crate::trainer::{train, RunRecord, RunStatus, TrainOutcome};

/// Episodes kept per dumped batch unless `dump_trajectories` asks for all.
pub const PLOT_EPISODES: usize = 10;

pub const TRAJECTORY_DIR: &str = "trajectories";

#[derive(Debug)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub csv_path: PathBuf,
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub plots: Vec<PathBuf>,
}

impl ExperimentSummary {
    pub fn failures(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| matches!(r.outcome.status, RunStatus::Failed { .. }))
    }
}

pub fn run_file_name(method: Method, seed: u64) -> String {
    format!("{}_{seed}.csv", method.name())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one row per iteration.
pub fn write_run_csv(path: &Path, records: &[RunRecord], seed: u64, n_theta: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["iter".to_string()];
    header.extend((0..n_theta).map(|i| format!("theta_{i}")));
    header.extend(
        [
            "grad_norm",
            "J_hat",
            "dist_to_opt",
            "cond_Av",
            "cond_Ag",
            "cond_AW",
            "clamped_eigs",
            "mu_used",
            "method",
            "seed",
            "penalty_hat",
            "J_eval",
        ]
        .map(String::from),
    );
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.theta.iter().map(|x| x.to_string()));
        row.push(r.grad_norm.to_string());
        row.push(r.j_hat.to_string());
        row.push(opt(r.dist_to_opt));
        row.push(r.critic.cond_av.to_string());
        row.push(r.critic.cond_ag.to_string());
        row.push(opt(r.critic.cond_aw));
        row.push(r.critic.clamped_eigs.to_string());
        row.push(r.mu.to_string());
        row.push(r.method.name().to_string());
        row.push(seed.to_string());
        row.push(r.penalty_hat.to_string());
        row.push(opt(r.j_eval));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn dump_batch(path: &Path, batch: &[Trajectory], all: bool) -> Result<()> {
    let keep = if all { batch.len() } else { batch.len().min(PLOT_EPISODES) };
    write_trajectories_csv(BufWriter::new(File::create(path)?), &batch[..keep])
}

/// Trains one `(method, seed)` pair and writes its logs.
pub fn run_single(cfg: &ExperimentConfig, method: Method, seed: u64, out: &Path) -> Result<RunResult> {
    let env = cfg.env.as_env();
    let policy = cfg.policy();
    let features = cfg.features();
    let theta_star = cfg.theta_star();
    let tc = cfg.train_config(method, seed);
    log::info!("starting {} seed {seed}", method.name());
    let outcome = train(env, &policy, &features, &cfg.theta0(), &tc, theta_star.as_ref())?;

    let csv_path = out.join(run_file_name(method, seed));
    write_run_csv(&csv_path, &outcome.records, seed, outcome.initial_theta.len())?;
    if cfg.plot || cfg.dump_trajectories {
        let dir = out.join(TRAJECTORY_DIR);
        fs::create_dir_all(&dir)?;
        let stem = format!("{}_{seed}", method.name());
        if let Some(b) = &outcome.first_batch {
            dump_batch(&dir.join(format!("{stem}_first.csv")), b, cfg.dump_trajectories)?;
        }
        if let Some(b) = &outcome.last_batch {
            dump_batch(&dir.join(format!("{stem}_last.csv")), b, cfg.dump_trajectories)?;
        }
    }
    log::info!("{} seed {seed} finished: {:?}", method.name(), outcome.status);
    Ok(RunResult {
        method,
        seed,
        outcome,
        csv_path,
    })
}

/// Runs every configured `(method, seed)` pair, at most `jobs` at a time.
///
/// Runs that fail at runtime keep their partial logs and are reported through
/// [`ExperimentSummary::failures`]; configuration and contract errors abort.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentSummary> {
    if jobs == 0 {
        return Err(Error::Input("jobs must be at least 1".into()));
    }
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let specs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();

    let results: Vec<Result<RunResult>> = if jobs == 1 {
        specs.iter().map(|&(m, s)| run_single(cfg, m, s, &out)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(specs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(m, s)) = specs.get(i) else { break };
                    let r = run_single(cfg, m, s, &out);
                    slots.lock().expect("result slots poisoned")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|r| r.expect("every run produces a result"))
            .collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let plots = if cfg.plot { plot_dir(&out)? } else { Vec::new() };
    Ok(ExperimentSummary {
        output_dir: out,
        runs,
        plots,
    })
}

/// Writes the Riccati optimum in long format: `quantity,row,col,value`.
pub fn write_oracle_csv(path: &Path, sol: &LqrSolution, initial_cost: Option<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["quantity", "row", "col", "value"])?;
    let scalar = |wtr: &mut csv::Writer<_>, name: &str, v: f64| wtr.write_record([name, "", "", &v.to_string()]);
    scalar(&mut wtr, "J_star", sol.j_star)?;
    scalar(&mut wtr, "bellman_residual", sol.bellman_residual)?;
    scalar(&mut wtr, "closed_loop_radius", sol.closed_loop_radius)?;
    if let Some(j0) = initial_cost {
        scalar(&mut wtr, "J_initial", j0)?;
    }
    for (name, m) in [("K_star", &sol.k_star), ("P", &sol.p)] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                wtr.write_record([name, &i.to_string(), &j.to_string(), &m[(i, j)].to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
