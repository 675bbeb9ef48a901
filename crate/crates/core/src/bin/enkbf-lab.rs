use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enkbf_core::diagnostics::write_diagnostics_csv;
use enkbf_core::enkbf::{FilterConfig, Scheme};
use enkbf_core::ensemble::DEFAULT_PINV_REL_TOL;
use enkbf_core::experiment::{
    parse_config, run_cell, run_epsilon_sweep, run_m_sweep, truth_seed, write_chaos_csv,
    write_results, ExperimentConfig,
};
use enkbf_core::kbf::{riccati_report, GaussianBelief};
use enkbf_core::meanfield::{run_chaos_experiment, MomentSource};
use enkbf_core::truth::simulate_truth;
use enkbf_core::{DMatrix, Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "enkbf-lab",
    version,
    about = "Ensemble Kalman-Bucy filter experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference signal and observations.
    Truth(Common),
    /// Run one filter at the first epsilon and the configured M.
    Filter(Common),
    /// Sweep epsilon_list at fixed M.
    SweepEpsilon(Common),
    /// Sweep epsilon_list x m_list.
    SweepM(Common),
    /// Propagation-of-chaos study.
    Chaos {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ensemble sizes.
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        /// Reference ensemble size for nonlinear models.
        #[arg(long)]
        m_ref: Option<usize>,
        /// Number of seeds per ensemble size.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Stationary Riccati solution of a linear model.
    Riccati(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn first_epsilon(cfg: &ExperimentConfig) -> f64 {
    cfg.epsilon_list[0]
}

fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn cmd_truth(cfg: &ExperimentConfig) -> Result<()> {
    let eps = first_epsilon(cfg);
    let model = cfg.model.build(eps)?;
    let seed = truth_seed(cfg.master_seed, 0);
    let truth = simulate_truth(&model, &cfg.x0_vector(), cfg.dt, cfg.n_steps, seed)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("truth.csv");
    truth.write_csv(&path)?;
    print_json(&json!({ "epsilon": eps, "seed": seed, "n_steps": cfg.n_steps, "path": path }));
    Ok(())
}

fn cmd_filter(cfg: &ExperimentConfig) -> Result<()> {
    let eps = first_epsilon(cfg);
    let cell = run_cell(cfg, eps, cfg.m, 0, true)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("diagnostics.csv");
    if let Some(rows) = &cell.diagnostics {
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        write_diagnostics_csv(&mut out, rows)
            .and_then(|_| std::io::Write::flush(&mut out))
            .map_err(|e| Error::io(&path, e))?;
    }
    print_json(&json!({
        "epsilon": cell.epsilon,
        "m": cell.m,
        "seed": cell.seed,
        "time_avg_mse": cell.time_avg_mse,
        "time_avg_lmax": cell.time_avg_lmax,
        "time_avg_lmin": cell.time_avg_lmin,
        "diverged": cell.diverged,
        "failure": cell.failure,
        "invariant_violations": cell.invariant_violations,
        "diagnostics": cell.diagnostics.as_ref().map(|_| path),
    }));
    if cell.diverged {
        return Err(Error::Experiment("filter diverged".into()));
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, over_m: bool) -> Result<()> {
    let result = if over_m {
        run_m_sweep(cfg)?
    } else {
        run_epsilon_sweep(cfg)?
    };
    let written = write_results(&result, &cfg.output_dir)?;
    let fits: Vec<_> = result
        .fits
        .iter()
        .map(|f| json!({ "m": f.m, "mse_slope": f.mse_slope, "lmax_slope": f.lmax_slope, "lmin_slope": f.lmin_slope }))
        .collect();
    print_json(
        &json!({ "fits": fits, "excluded_cells": result.excluded_cells, "written": written }),
    );
    Ok(())
}

fn cmd_chaos(
    cfg: &ExperimentConfig,
    m_list: Option<Vec<usize>>,
    m_ref: Option<usize>,
    seeds: Option<usize>,
) -> Result<()> {
    let eps = first_epsilon(cfg);
    let model = cfg.model.build(eps)?;
    let m_list = m_list
        .or_else(|| cfg.m_list.clone())
        .unwrap_or_else(|| vec![cfg.m]);
    let n_seeds = seeds.unwrap_or(cfg.n_seeds);
    let x0 = cfg.x0_vector();
    let truth = simulate_truth(
        &model,
        &x0,
        cfg.dt,
        cfg.n_steps,
        truth_seed(cfg.master_seed, 0),
    )?;
    let nx = model.nx();
    let init = GaussianBelief {
        mean: x0,
        cov: DMatrix::identity(nx, nx) * (cfg.init_scale * cfg.init_scale * eps),
    };
    let filter_cfg = FilterConfig {
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        m: m_list.iter().copied().max().unwrap_or(cfg.m),
        scheme: Scheme::General,
        pinv_rel_tol: DEFAULT_PINV_REL_TOL,
        record_every: 1,
    };
    let linear = cfg.model.linear_spec(eps)?;
    let m_max = m_list.iter().copied().max().unwrap_or(cfg.m);
    let source = match &linear {
        Some(spec) => MomentSource::LinearExact(spec),
        None => MomentSource::JumboEnsemble {
            m_ref: m_ref.unwrap_or(64 * m_max),
        },
    };
    let rows = run_chaos_experiment(
        &model,
        &truth,
        &m_list,
        source,
        n_seeds,
        &filter_cfg,
        &init,
        cfg.master_seed,
    )?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("chaos.csv");
    write_chaos_csv(&rows, &path)?;
    print_json(&json!({ "rows": rows, "path": path }));
    Ok(())
}

fn cmd_riccati(cfg: &ExperimentConfig) -> Result<()> {
    let eps = first_epsilon(cfg);
    let linear = cfg
        .model
        .linear_spec(eps)?
        .ok_or_else(|| Error::config("model", "riccati requires a linear model"))?;
    let report = riccati_report(&linear, 1e-12, 10_000_000)?;
    print_json(&serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Truth(c)
        | Command::Filter(c)
        | Command::SweepEpsilon(c)
        | Command::SweepM(c)
        | Command::Riccati(c) => c,
        Command::Chaos { common, .. } => common,
    };
    let cfg = load(common)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = common.workers {
        if k == 0 {
            return Err(Error::invalid("--workers must be at least 1"));
        }
        pool = pool.num_threads(k);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Experiment(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Truth(_) => cmd_truth(&cfg),
        Command::Filter(_) => cmd_filter(&cfg),
        Command::SweepEpsilon(_) => cmd_sweep(&cfg, false),
        Command::SweepM(_) => cmd_sweep(&cfg, true),
        Command::Chaos {
            m_list,
            m_ref,
            seeds,
            ..
        } => cmd_chaos(&cfg, m_list, m_ref, seeds),
        Command::Riccati(_) => cmd_riccati(&cfg),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
