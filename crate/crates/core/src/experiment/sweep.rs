//! ε- and M-sweeps of twin experiments with seed-averaged log-log fits.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{loglog_slope, time_average, DiagnosticsRow};
use crate::enkbf::{run_filter, FilterConfig, Scheme};
use crate::ensemble::{Ensemble, DEFAULT_PINV_REL_TOL};
use crate::experiment::config::ExperimentConfig;
use crate::rng::{mix_seed, stream_rng, ENSEMBLE_STREAM};
use crate::truth::simulate_truth;
use crate::{Error, Result};

/// The λ_min fit only uses ε at or below this value; the smallest eigenvalue
/// departs from the √ε law at the large-noise end.
pub const LMIN_FIT_MAX_EPSILON: f64 = 0.05;

/// Slack used when checking the per-row covariance invariants.
pub const INVARIANT_REL_SLACK: f64 = 1e-10;

/// One `(ε, M, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub epsilon: f64,
    pub m: usize,
    pub seed_index: usize,
    /// Seed of the truth path; also keys the initial ensemble.
    pub seed: u64,
    pub time_avg_mse: f64,
    pub time_avg_lmax: f64,
    pub time_avg_lmin: f64,
    pub diverged: bool,
    pub failure: Option<String>,
    pub n_records: usize,
    /// Recorded rows violating `λmin ≤ λmax`, `V = tr P` or the Frobenius
    /// sandwich.
    pub invariant_violations: usize,
    #[serde(skip)]
    pub diagnostics: Option<Vec<DiagnosticsRow>>,
}

/// Seed-averaged values at one ε.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitPoint {
    pub epsilon: f64,
    pub seeds_used: usize,
    pub mse: f64,
    pub lmax: f64,
    pub lmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub m: usize,
    pub mse_slope: Option<f64>,
    pub lmax_slope: Option<f64>,
    pub lmin_slope: Option<f64>,
    pub points: Vec<FitPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sorted by `(ε, M, seed)`.
    pub rows: Vec<CellResult>,
    /// One fit per ensemble size, ascending in `M`.
    pub fits: Vec<SlopeFit>,
    pub excluded_cells: usize,
    pub config: ExperimentConfig,
}

impl SweepResult {
    /// The fit for `m`, if that ensemble size was swept.
    pub fn fit_for(&self, m: usize) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.m == m)
    }

    pub fn seeds(&self) -> Vec<(usize, u64)> {
        (0..self.config.n_seeds)
            .map(|s| (s, truth_seed(self.config.master_seed, s)))
            .collect()
    }
}

pub fn truth_seed(master_seed: u64, seed_index: usize) -> u64 {
    mix_seed(master_seed, seed_index as u64)
}

fn failed_cell(epsilon: f64, m: usize, seed_index: usize, seed: u64, err: &Error) -> CellResult {
    CellResult {
        epsilon,
        m,
        seed_index,
        seed,
        time_avg_mse: f64::NAN,
        time_avg_lmax: f64::NAN,
        time_avg_lmin: f64::NAN,
        diverged: true,
        failure: Some(err.to_string()),
        n_records: 0,
        invariant_violations: 0,
        diagnostics: None,
    }
}

/// Runs a single twin experiment. Divergence is reported in the result, not
/// as an error; invalid inputs are errors.
pub fn run_cell(
    cfg: &ExperimentConfig,
    epsilon: f64,
    m: usize,
    seed_index: usize,
    keep_diagnostics: bool,
) -> Result<CellResult> {
    let seed = truth_seed(cfg.master_seed, seed_index);
    let model = cfg.model.build(epsilon)?;
    let x0 = cfg.x0_vector();
    let truth = match simulate_truth(&model, &x0, cfg.dt, cfg.n_steps, seed) {
        Ok(t) => t,
        Err(e @ Error::Divergence { .. }) => {
            return Ok(failed_cell(epsilon, m, seed_index, seed, &e))
        }
        Err(e) => return Err(e),
    };
    let mut rng = stream_rng(seed, ENSEMBLE_STREAM);
    let spread = DMatrix::identity(model.nx(), model.nx()) * (cfg.init_scale * epsilon.sqrt());
    let init = Ensemble::sample(&mut rng, &x0, &spread, m)?;
    let scheme = if model.fully_observed_epsilon().is_some() {
        Scheme::FullyObservedRegularized
    } else {
        Scheme::General
    };
    let filter_cfg = FilterConfig {
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        m,
        scheme,
        pinv_rel_tol: DEFAULT_PINV_REL_TOL,
        record_every: cfg.effective_record_every(),
    };
    let run = match run_filter(&model, &truth, &filter_cfg, &init, None) {
        Ok(run) => run,
        Err(e @ Error::Divergence { .. }) => {
            return Ok(failed_cell(epsilon, m, seed_index, seed, &e))
        }
        Err(e) => return Err(e),
    };
    let series = |f: fn(&DiagnosticsRow) -> f64| run.diags.iter().map(f).collect::<Vec<_>>();
    let burn = cfg.burn_in_fraction;
    let invariant_violations = run
        .diags
        .iter()
        .filter(|r| !r.satisfies_invariants(m, INVARIANT_REL_SLACK))
        .count();
    Ok(CellResult {
        epsilon,
        m,
        seed_index,
        seed,
        time_avg_mse: time_average(&series(|r| r.e_sq), burn)?,
        time_avg_lmax: time_average(&series(|r| r.lambda_max), burn)?,
        time_avg_lmin: time_average(&series(|r| r.lambda_min), burn)?,
        diverged: false,
        failure: None,
        n_records: run.diags.len(),
        invariant_violations,
        diagnostics: keep_diagnostics.then_some(run.diags),
    })
}

fn cmp_cells(a: &CellResult, b: &CellResult) -> Ordering {
    a.epsilon
        .total_cmp(&b.epsilon)
        .then(a.m.cmp(&b.m))
        .then(a.seed_index.cmp(&b.seed_index))
}

fn slope_of(points: &[(f64, f64)]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    loglog_slope(&xs, &ys).ok().map(|(s, _)| s)
}

/// Seed-averages non-diverged cells per `(M, ε)` and fits log-log slopes in
/// ε. Slopes are `None` when fewer than two ε values are available.
pub fn fit_slopes(rows: &[CellResult]) -> Vec<SlopeFit> {
    let mut ms: Vec<usize> = rows.iter().map(|r| r.m).collect();
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter()
        .map(|m| {
            let mut eps: Vec<f64> = rows
                .iter()
                .filter(|r| r.m == m)
                .map(|r| r.epsilon)
                .collect();
            eps.sort_by(f64::total_cmp);
            eps.dedup();
            let points: Vec<FitPoint> = eps
                .into_iter()
                .filter_map(|e| {
                    let cells: Vec<&CellResult> = rows
                        .iter()
                        .filter(|r| r.m == m && r.epsilon == e && !r.diverged)
                        .collect();
                    if cells.is_empty() {
                        return None;
                    }
                    let n = cells.len() as f64;
                    let avg =
                        |f: fn(&CellResult) -> f64| cells.iter().map(|c| f(c)).sum::<f64>() / n;
                    Some(FitPoint {
                        epsilon: e,
                        seeds_used: cells.len(),
                        mse: avg(|c| c.time_avg_mse),
                        lmax: avg(|c| c.time_avg_lmax),
                        lmin: avg(|c| c.time_avg_lmin),
                    })
                })
                .collect();
            let mse: Vec<_> = points.iter().map(|p| (p.epsilon, p.mse)).collect();
            let lmax: Vec<_> = points.iter().map(|p| (p.epsilon, p.lmax)).collect();
            let lmin: Vec<_> = points
                .iter()
                .filter(|p| p.epsilon <= LMIN_FIT_MAX_EPSILON)
                .map(|p| (p.epsilon, p.lmin))
                .collect();
            SlopeFit {
                m,
                mse_slope: slope_of(&mse),
                lmax_slope: slope_of(&lmax),
                lmin_slope: slope_of(&lmin),
                points,
            }
        })
        .collect()
}

fn run_sweep(cfg: &ExperimentConfig, m_values: &[usize]) -> Result<SweepResult> {
    cfg.validate()?;
    let keep = cfg.record_every.is_some();
    let mut cells = Vec::new();
    for &eps in &cfg.epsilon_list {
        for &m in m_values {
            for s in 0..cfg.n_seeds {
                cells.push((eps, m, s));
            }
        }
    }
    let mut rows = cells
        .par_iter()
        .map(|&(eps, m, s)| run_cell(cfg, eps, m, s, keep))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(cmp_cells);
    let excluded_cells = rows.iter().filter(|r| r.diverged).count();
    if !rows.is_empty() && excluded_cells == rows.len() {
        return Err(Error::Experiment(format!(
            "all {} cells diverged",
            rows.len()
        )));
    }
    let fits = fit_slopes(&rows);
    Ok(SweepResult {
        rows,
        fits,
        excluded_cells,
        config: cfg.clone(),
    })
}

/// Sweeps `epsilon_list` at the configured ensemble size `m`.
pub fn run_epsilon_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    run_sweep(cfg, &[cfg.m])
}

/// Sweeps `epsilon_list × m_list`.
pub fn run_m_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let list = cfg
        .m_list
        .clone()
        .ok_or_else(|| Error::config("m_list", "required for an M sweep"))?;
    run_sweep(cfg, &list)
}
