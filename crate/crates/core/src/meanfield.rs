//! Mean-field (McKean-Vlasov) particles and the coupled propagation-of-chaos
//! experiment.
//!
//! A mean-field particle follows the same update as an EnKBF particle, except
//! that the mean and covariances are supplied externally instead of being
//! estimated from the particles themselves. For linear models the exact
//! moments come from the Kalman-Bucy belief; otherwise a much larger
//! reference ensemble stands in for them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::enkbf::{general_step_with_stats, FilterConfig};
use crate::ensemble::{forward_images, EmpiricalStats, Ensemble};
use crate::kbf::{kbf_mean_step, GaussianBelief};
use crate::linalg::sym_eigen;
use crate::model::{check_len, LinearModelSpec, ModelSpec};
use crate::rng::{mix_seed, stream_rng, ENSEMBLE_STREAM};
use crate::truth::{sqrt_psd, TruthPath};
use crate::{Error, Result};

/// Smallest allowed ratio `m_ref / M` for the reference-ensemble surrogate.
pub const MIN_REFERENCE_RATIO: usize = 8;

/// Mean-field moments at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub h_mean: DVector<f64>,
    pub cross_cov: DMatrix<f64>,
}

impl Moments {
    pub fn from_stats(stats: &EmpiricalStats) -> Self {
        Self {
            mean: stats.mean.clone(),
            cov: stats.cov.clone(),
            h_mean: stats.h_mean.clone(),
            cross_cov: stats.cross_cov.clone(),
        }
    }

    /// Gaussian law pushed through the linear forward map.
    pub fn from_belief(belief: &GaussianBelief, linear: &LinearModelSpec) -> Self {
        Self {
            mean: belief.mean.clone(),
            cov: belief.cov.clone(),
            h_mean: &linear.h_matrix * &belief.mean,
            cross_cov: &belief.cov * linear.h_matrix.transpose(),
        }
    }
}

/// Where the mean-field moments come from.
#[derive(Debug, Clone, Copy)]
pub enum MomentSource<'a> {
    /// Kalman-Bucy belief of a linear model.
    LinearExact(&'a LinearModelSpec),
    /// Reference ensemble of `m_ref` particles evolved by the EnKBF.
    JumboEnsemble { m_ref: usize },
}

/// One step of the mean-field particles with external moments:
/// `X̂ᵢ + dt f(X̂ᵢ) + dt D 𝒫⁻¹ (X̂ᵢ - x̄) - ½ 𝒬 R⁻¹ (dt h(X̂ᵢ) + dt h̄ - 2 dy)`.
pub fn meanfield_step(
    particles: &Ensemble,
    moments: &Moments,
    model: &ModelSpec,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<Ensemble> {
    check_len("ensemble state", model.nx(), particles.nx())?;
    check_len("observation increment", model.ny(), dy.len())?;
    check_len("moment mean", model.nx(), moments.mean.len())?;
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let eig = sym_eigen(&moments.cov);
    let (lmin, lmax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(lmax > 0.0) || lmin <= 1e-12 * lmax {
        return Err(Error::RankDeficient {
            lambda_min: lmin,
            lambda_max: lmax,
        });
    }
    let stats = EmpiricalStats {
        mean: moments.mean.clone(),
        cov: moments.cov.clone(),
        h_mean: moments.h_mean.clone(),
        cross_cov: moments.cross_cov.clone(),
        v: moments.cov.trace(),
    };
    let hx = forward_images(particles, model);
    // Full rank was checked, so the truncated inverse is the inverse.
    general_step_with_stats(particles, &stats, hx.as_ref(), model, dy, dt, 1e-12, 1)
}

/// Evolving source of mean-field moments.
enum MomentState<'a> {
    Linear {
        linear: &'a LinearModelSpec,
        belief: GaussianBelief,
    },
    Reference(Ensemble),
}

impl MomentState<'_> {
    fn moments(&self, model: &ModelSpec) -> Moments {
        match self {
            MomentState::Linear { linear, belief } => Moments::from_belief(belief, linear),
            MomentState::Reference(ens) => {
                let hx = forward_images(ens, model);
                Moments::from_stats(&EmpiricalStats::from_particles(&ens.particles, hx.as_ref()))
            }
        }
    }

    fn advance(&mut self, model: &ModelSpec, dy: &DVector<f64>, dt: f64, pinv: f64) -> Result<()> {
        match self {
            MomentState::Linear { linear, belief } => {
                *belief = kbf_mean_step(belief, linear, dy, dt)?;
            }
            MomentState::Reference(ens) => {
                let hx = forward_images(ens, model);
                let stats = EmpiricalStats::from_particles(&ens.particles, hx.as_ref());
                *ens = general_step_with_stats(ens, &stats, hx.as_ref(), model, dy, dt, pinv, 1)?;
            }
        }
        Ok(())
    }
}

/// `(1/M) Σᵢ ‖Xᵢ - X̂ᵢ‖²`.
pub fn particle_gap(a: &Ensemble, b: &Ensemble) -> f64 {
    let m = a.m() as f64;
    (&a.particles - &b.particles).norm_squared() / m
}

/// Runs the interacting EnKBF particles and the mean-field particles from
/// the same initial ensemble against the same increments and returns the
/// terminal gap.
///
/// `reference` supplies the initial reference ensemble when the moments come
/// from a jumbo ensemble.
pub fn coupled_gap(
    model: &ModelSpec,
    truth: &TruthPath,
    cfg: &FilterConfig,
    initial: &Ensemble,
    linear: Option<(&LinearModelSpec, &GaussianBelief)>,
    reference: Option<&Ensemble>,
) -> Result<f64> {
    let mut state = match (linear, reference) {
        (Some((linear, belief)), _) => MomentState::Linear {
            linear,
            belief: belief.clone(),
        },
        (None, Some(reference)) => MomentState::Reference(reference.clone()),
        (None, None) => {
            return Err(Error::invalid(
                "coupled run needs either linear moments or a reference ensemble",
            ))
        }
    };
    if truth.n_steps() < cfg.n_steps {
        return Err(Error::invalid("truth is shorter than the requested run"));
    }
    let mut ens = initial.clone();
    let mut mf = initial.clone();
    for n in 0..cfg.n_steps {
        let dy = &truth.obs_increments[n];
        let moments = state.moments(model);
        let hx = forward_images(&ens, model);
        let stats = EmpiricalStats::from_particles(&ens.particles, hx.as_ref());
        ens = general_step_with_stats(
            &ens,
            &stats,
            hx.as_ref(),
            model,
            dy,
            cfg.dt,
            cfg.pinv_rel_tol,
            n + 1,
        )?;
        mf = meanfield_step(&mf, &moments, model, dy, cfg.dt).map_err(|e| match e {
            Error::RankDeficient { .. } => Error::Divergence {
                step: n + 1,
                reason: format!("mean-field covariance became singular: {e}"),
            },
            other => other,
        })?;
        state.advance(model, dy, cfg.dt, cfg.pinv_rel_tol)?;
    }
    Ok(particle_gap(&ens, &mf))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosRow {
    pub m: usize,
    pub seeds_used: usize,
    pub seeds_failed: usize,
    pub mean_gap: f64,
    pub stderr_gap: f64,
}

pub const CHAOS_CSV_HEADER: &str = "M,seeds_used,mean_gap,stderr_gap";

impl ChaosRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.m,
            self.seeds_used,
            crate::diagnostics::format_full(self.mean_gap),
            crate::diagnostics::format_full(self.stderr_gap)
        )
    }
}

/// Propagation-of-chaos study: for every `M` and seed, draws `M` particles
/// from `init`, runs the coupled pair to `cfg.n_steps` and averages the
/// terminal gaps over seeds. Failed seeds are excluded and counted.
#[allow(clippy::too_many_arguments)]
pub fn run_chaos_experiment(
    model: &ModelSpec,
    truth: &TruthPath,
    m_list: &[usize],
    source: MomentSource<'_>,
    n_seeds: usize,
    cfg: &FilterConfig,
    init: &GaussianBelief,
    master_seed: u64,
) -> Result<Vec<ChaosRow>> {
    if n_seeds == 0 {
        return Ok(Vec::new());
    }
    if let Some(&bad) = m_list.iter().find(|&&m| m < 2) {
        return Err(Error::invalid(format!(
            "ensemble size must be at least 2, got {bad}"
        )));
    }
    check_len("initial mean", model.nx(), init.mean.len())?;
    let m_max = m_list.iter().copied().max().unwrap_or(0);
    if let MomentSource::JumboEnsemble { m_ref } = source {
        if m_ref < MIN_REFERENCE_RATIO * m_max {
            return Err(Error::invalid(format!(
                "m_ref = {m_ref} must be at least {MIN_REFERENCE_RATIO} x max(M) = {}",
                MIN_REFERENCE_RATIO * m_max
            )));
        }
    }
    let factor = sqrt_psd(&init.cov)?;

    let cells: Vec<(usize, usize)> = m_list
        .iter()
        .flat_map(|&m| (0..n_seeds).map(move |s| (m, s)))
        .collect();
    let gaps: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(m, s)| {
            let seed = mix_seed(mix_seed(master_seed, m as u64), s as u64);
            let mut rng = stream_rng(seed, ENSEMBLE_STREAM);
            let draw = match source {
                MomentSource::LinearExact(_) => m,
                MomentSource::JumboEnsemble { m_ref } => m_ref,
            };
            // Columns are filled in order, so the first `m` reference
            // particles are the coupled ones.
            let pool = Ensemble::sample(&mut rng, &init.mean, &factor, draw)?;
            let initial = Ensemble::new(pool.particles.columns(0, m).into_owned(), 0.0)?;
            let cell_cfg = FilterConfig { m, ..cfg.clone() };
            match source {
                MomentSource::LinearExact(linear) => coupled_gap(
                    model,
                    truth,
                    &cell_cfg,
                    &initial,
                    Some((linear, init)),
                    None,
                ),
                MomentSource::JumboEnsemble { .. } => {
                    coupled_gap(model, truth, &cell_cfg, &initial, None, Some(&pool))
                }
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(m_list.len());
    for (k, &m) in m_list.iter().enumerate() {
        let per_m = &gaps[k * n_seeds..(k + 1) * n_seeds];
        let ok: Vec<f64> = per_m
            .iter()
            .filter_map(|g| g.as_ref().ok().copied())
            .collect();
        let failed = per_m.len() - ok.len();
        let n = ok.len() as f64;
        let (mean, stderr) = if ok.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mean = ok.iter().sum::<f64>() / n;
            let var = if ok.len() > 1 {
                ok.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, (var / n).sqrt())
        };
        rows.push(ChaosRow {
            m,
            seeds_used: ok.len(),
            seeds_failed: failed,
            mean_gap: mean,
            stderr_gap: stderr,
        });
    }
    Ok(rows)
}

/// Sufficient condition `‖f‖²_Lip < 2 λmin(D) ‖R⁻¹‖_F ‖h‖²_Lip` for a positive
/// lower bound on the mean-field covariance, and the corresponding
/// `κ₋ = (2 λmin(D) ‖R⁻¹‖_F ‖h‖²_Lip - ‖f‖²_Lip) / (2 ‖R⁻¹‖²_F ‖h‖⁴_Lip C₄)`.
///
/// `c4` bounds the mean-field variance over the horizon of interest and must
/// be supplied by the caller.
pub fn check_meanfield_condition(
    model: &ModelSpec,
    f_lip: f64,
    h_lip: f64,
    c4: f64,
) -> (bool, f64) {
    let lmin_d = sym_eigen(model.diffusion_tensor()).eigenvalues.min();
    let rinv_f = model.obs_cov_inv().norm();
    let h2 = h_lip * h_lip;
    let margin = 2.0 * lmin_d * rinv_f * h2 - f_lip * f_lip;
    let kappa = margin / (2.0 * rinv_f * rinv_f * h2 * h2 * c4);
    (margin > 0.0, kappa)
}
