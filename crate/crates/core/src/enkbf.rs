//! Deterministic ensemble Kalman-Bucy filter.
//!
//! Two time discretizations are provided. The general scheme is the plain
//! Euler step of
//!
//! ```text
//! dXᵢ = f(Xᵢ) dt + D P⁺ (Xᵢ - x̄) dt - ½ Q R⁻¹ (h(Xᵢ) dt + h̄ dt - 2 dY)
//! ```
//!
//! and the fully observed scheme (`h(x) = x`, `R = εI`) replaces the gain
//! `(dt/ε) P` by the regularized `P (P + (ε/dt) I)⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsRow;
use crate::ensemble::{
    forward_images, pseudo_inverse_unchecked, EmpiricalStats, Ensemble, DEFAULT_PINV_REL_TOL,
};
use crate::kbf::riccati_rhs;
use crate::linalg::sym_eigen;
use crate::model::{check_len, LinearModelSpec, ModelSpec};
use crate::truth::TruthPath;
use crate::{Error, Result};

/// Spread beyond which a run is declared divergent.
pub const DIVERGENCE_SPREAD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    General,
    FullyObservedRegularized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub m: usize,
    pub scheme: Scheme,
    pub pinv_rel_tol: f64,
    pub record_every: usize,
}

impl FilterConfig {
    pub fn new(dt: f64, n_steps: usize, m: usize, scheme: Scheme) -> Self {
        Self {
            dt,
            n_steps,
            m,
            scheme,
            pinv_rel_tol: DEFAULT_PINV_REL_TOL,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be at least 1"));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!(
                "ensemble size must be at least 2, got {}",
                self.m
            )));
        }
        if !(self.pinv_rel_tol > 0.0 && self.pinv_rel_tol < 1.0) {
            return Err(Error::invalid("pinv_rel_tol must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub diags: Vec<DiagnosticsRow>,
    pub final_ensemble: Ensemble,
}

fn check_step_inputs(ens: &Ensemble, model: &ModelSpec, dy: &DVector<f64>, dt: f64) -> Result<()> {
    check_len("ensemble state", model.nx(), ens.nx())?;
    check_len("observation increment", model.ny(), dy.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

fn finite_or_divergence(particles: DMatrix<f64>, t: f64, step: usize) -> Result<Ensemble> {
    if particles.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            reason: "non-finite particle state".into(),
        });
    }
    Ok(Ensemble { particles, t })
}

/// Adds `dt f(Xᵢ) + dt D P⁺ (Xᵢ - x̄)` to each particle column of `out`.
fn add_drift_and_spread(
    out: &mut DMatrix<f64>,
    ens: &Ensemble,
    model: &ModelSpec,
    stats: &EmpiricalStats,
    dt: f64,
    pinv_rel_tol: f64,
) {
    let spread = model.diffusion_tensor() * pseudo_inverse_unchecked(&stats.cov, pinv_rel_tol) * dt;
    for (i, col) in ens.particles.column_iter().enumerate() {
        let x = col.into_owned();
        let mut next = model.drift_unchecked(&x) * dt;
        next += &x;
        let dev = &x - &stats.mean;
        next.gemv(1.0, &spread, &dev, 1.0);
        out.set_column(i, &next);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn general_step_with_stats(
    ens: &Ensemble,
    stats: &EmpiricalStats,
    hx: Option<&DMatrix<f64>>,
    model: &ModelSpec,
    dy: &DVector<f64>,
    dt: f64,
    pinv_rel_tol: f64,
    step: usize,
) -> Result<Ensemble> {
    let mut out = DMatrix::zeros(ens.nx(), ens.m());
    add_drift_and_spread(&mut out, ens, model, stats, dt, pinv_rel_tol);
    let gain = &stats.cross_cov * model.obs_cov_inv() * 0.5;
    // Shared part of the innovation: dt h̄ - 2 dy.
    let shared = &stats.h_mean * dt - dy * 2.0;
    for i in 0..ens.m() {
        let hxi = match hx {
            Some(hx) => hx.column(i).into_owned(),
            None => ens.particles.column(i).into_owned(),
        };
        let innovation = hxi * dt + &shared;
        let mut col = out.column_mut(i);
        col.gemv(-1.0, &gain, &innovation, 1.0);
    }
    finite_or_divergence(out, ens.t + dt, step)
}

/// One Euler step of the general EnKBF.
pub fn enkbf_step_general(
    ens: &Ensemble,
    model: &ModelSpec,
    dy: &DVector<f64>,
    dt: f64,
    pinv_rel_tol: f64,
) -> Result<Ensemble> {
    check_step_inputs(ens, model, dy, dt)?;
    let hx = forward_images(ens, model);
    let stats = EmpiricalStats::from_particles(&ens.particles, hx.as_ref());
    general_step_with_stats(ens, &stats, hx.as_ref(), model, dy, dt, pinv_rel_tol, 1)
}

/// `P (P + c I)⁻¹` for symmetric PSD `P` and `c > 0`.
fn regularized_gain(p: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let n = p.nrows();
    let shifted = p + DMatrix::identity(n, n) * c;
    let inv = match shifted.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => shifted
            .pseudo_inverse(0.0)
            .unwrap_or_else(|_| DMatrix::zeros(n, n)),
    };
    p * inv
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fully_observed_step_with_stats(
    ens: &Ensemble,
    stats: &EmpiricalStats,
    model: &ModelSpec,
    epsilon: f64,
    dy: &DVector<f64>,
    dt: f64,
    pinv_rel_tol: f64,
    step: usize,
) -> Result<Ensemble> {
    let mut out = DMatrix::zeros(ens.nx(), ens.m());
    add_drift_and_spread(&mut out, ens, model, stats, dt, pinv_rel_tol);
    let gain = regularized_gain(&stats.cov, epsilon / dt) * 0.5;
    // x̄ - 2 dy / dt
    let shared = &stats.mean - dy * (2.0 / dt);
    for i in 0..ens.m() {
        let innovation = ens.particles.column(i) + &shared;
        let mut col = out.column_mut(i);
        col.gemv(-1.0, &gain, &innovation, 1.0);
    }
    finite_or_divergence(out, ens.t + dt, step)
}

fn require_fully_observed(model: &ModelSpec, epsilon: f64) -> Result<()> {
    match model.fully_observed_epsilon() {
        Some(eps) if eps == epsilon => Ok(()),
        Some(eps) => Err(Error::invalid(format!(
            "model has R = {eps} I but epsilon = {epsilon} was supplied"
        ))),
        None => Err(Error::invalid(
            "fully observed scheme requires h(x) = x and R = epsilon I",
        )),
    }
}

/// One step of the regularized fully observed scheme:
/// `Xᵢ + dt f(Xᵢ) + dt D P⁺ (Xᵢ - x̄) - ½ P (P + (ε/dt) I)⁻¹ (Xᵢ + x̄ - 2 dy/dt)`.
pub fn enkbf_step_fully_observed(
    ens: &Ensemble,
    model: &ModelSpec,
    epsilon: f64,
    dy: &DVector<f64>,
    dt: f64,
    pinv_rel_tol: f64,
) -> Result<Ensemble> {
    check_step_inputs(ens, model, dy, dt)?;
    require_fully_observed(model, epsilon)?;
    let stats = EmpiricalStats::from_particles(&ens.particles, None);
    fully_observed_step_with_stats(ens, &stats, model, epsilon, dy, dt, pinv_rel_tol, 1)
}

/// Euler update of the ensemble mean, `x̄ + dt f̄ - Q R⁻¹ (dt h̄ - dy)`,
/// where `f̄` is the particle average of the drift.
pub fn euler_mean_update(
    ens: &Ensemble,
    model: &ModelSpec,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    check_step_inputs(ens, model, dy, dt)?;
    let hx = forward_images(ens, model);
    let stats = EmpiricalStats::from_particles(&ens.particles, hx.as_ref());
    let mut f_mean = DVector::zeros(ens.nx());
    for col in ens.particles.column_iter() {
        f_mean += model.drift_unchecked(&col.into_owned());
    }
    f_mean /= ens.m() as f64;
    let innovation = &stats.h_mean * dt - dy;
    Ok(&stats.mean + f_mean * dt - &stats.cross_cov * model.obs_cov_inv() * innovation)
}

/// Right-hand side of the ensemble covariance equation for a linear model,
/// `A P + P Aᵀ + 2D - P Hᵀ R⁻¹ H P`. Requires an invertible `P`.
pub fn covariance_rhs(stats: &EmpiricalStats, linear: &LinearModelSpec) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(&stats.cov);
    let (lmin, lmax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(lmax > 0.0) || lmin <= DEFAULT_PINV_REL_TOL * lmax {
        return Err(Error::RankDeficient {
            lambda_min: lmin,
            lambda_max: lmax,
        });
    }
    riccati_rhs(&stats.cov, linear)
}

/// Runs the filter over every increment of `truth`, recording diagnostics
/// at steps that are multiples of `cfg.record_every`.
///
/// `epsilon` is only used by the fully observed scheme; when absent it is
/// read from the model.
pub fn run_filter(
    model: &ModelSpec,
    truth: &TruthPath,
    cfg: &FilterConfig,
    init: &Ensemble,
    epsilon: Option<f64>,
) -> Result<FilterRun> {
    cfg.validate()?;
    if truth.dt != cfg.dt {
        return Err(Error::invalid(format!(
            "truth dt {} differs from filter dt {}",
            truth.dt, cfg.dt
        )));
    }
    if init.m() != cfg.m {
        return Err(Error::invalid(format!(
            "initial ensemble has {} particles, config expects {}",
            init.m(),
            cfg.m
        )));
    }
    check_len("ensemble state", model.nx(), init.nx())?;
    if truth.n_steps() < cfg.n_steps {
        return Err(Error::invalid(format!(
            "truth has {} steps, filter needs {}",
            truth.n_steps(),
            cfg.n_steps
        )));
    }
    let epsilon = match cfg.scheme {
        Scheme::General => f64::NAN,
        Scheme::FullyObservedRegularized => {
            let eps = epsilon
                .or_else(|| model.fully_observed_epsilon())
                .ok_or_else(|| {
                    Error::invalid("fully observed scheme requires h(x) = x and R = epsilon I")
                })?;
            require_fully_observed(model, eps)?;
            eps
        }
    };

    let capacity = cfg.n_steps / cfg.record_every + 1;
    let mut run = FilterRun {
        times: Vec::with_capacity(capacity),
        means: Vec::with_capacity(capacity),
        diags: Vec::with_capacity(capacity),
        final_ensemble: init.clone(),
    };
    let mut ens = init.clone();
    let mut n = 0;
    loop {
        let hx = match cfg.scheme {
            Scheme::General => forward_images(&ens, model),
            Scheme::FullyObservedRegularized => None,
        };
        let stats = EmpiricalStats::from_particles(&ens.particles, hx.as_ref());
        if !(stats.v <= DIVERGENCE_SPREAD) {
            return Err(Error::Divergence {
                step: n,
                reason: format!(
                    "ensemble spread V = {:e} exceeds {DIVERGENCE_SPREAD:e}",
                    stats.v
                ),
            });
        }
        if n % cfg.record_every == 0 {
            let t = truth.time(n);
            run.times.push(t);
            run.means.push(stats.mean.clone());
            run.diags
                .push(DiagnosticsRow::from_stats(t, &truth.states[n], &stats));
        }
        if n == cfg.n_steps {
            break;
        }
        let dy = &truth.obs_increments[n];
        ens = match cfg.scheme {
            Scheme::General => general_step_with_stats(
                &ens,
                &stats,
                hx.as_ref(),
                model,
                dy,
                cfg.dt,
                cfg.pinv_rel_tol,
                n + 1,
            )?,
            Scheme::FullyObservedRegularized => fully_observed_step_with_stats(
                &ens,
                &stats,
                model,
                epsilon,
                dy,
                cfg.dt,
                cfg.pinv_rel_tol,
                n + 1,
            )?,
        };
        n += 1;
    }
    run.final_ensemble = ens;
    Ok(run)
}
