//! Kalman-Bucy reference filter for linear models: Riccati integration,
//! stationary solution, mean propagation, and rank conditions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::frobenius_norm;
use crate::linalg::{numerical_rank, sym_eigen, symmetrized};
use crate::model::{check_len, LinearModelSpec};
use crate::{Error, Result};

/// Relative singular-value threshold for the rank tests.
pub const RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `A P + P Aᵀ + 2D - P Hᵀ R⁻¹ H P`, symmetrized.
pub fn riccati_rhs(p: &DMatrix<f64>, linear: &LinearModelSpec) -> Result<DMatrix<f64>> {
    check_len("rows of P", linear.nx(), p.nrows())?;
    check_len("columns of P", linear.nx(), p.ncols())?;
    let s = information_matrix(linear)?;
    Ok(riccati_rhs_with(
        p,
        &linear.a_matrix,
        &linear.diffusion_tensor(),
        &s,
    ))
}

/// `Hᵀ R⁻¹ H`.
fn information_matrix(linear: &LinearModelSpec) -> Result<DMatrix<f64>> {
    let rinv = linear.obs_cov_inv()?;
    Ok(symmetrized(
        linear.h_matrix.transpose() * rinv * &linear.h_matrix,
    ))
}

fn riccati_rhs_with(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    d: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ap = a * p;
    let out = &ap + ap.transpose() + d * 2.0 - p * s * p;
    symmetrized(out)
}

fn rk4_step(
    p: &DMatrix<f64>,
    h: f64,
    a: &DMatrix<f64>,
    d: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let k1 = riccati_rhs_with(p, a, d, s);
    let k2 = riccati_rhs_with(&(p + &k1 * (0.5 * h)), a, d, s);
    let k3 = riccati_rhs_with(&(p + &k2 * (0.5 * h)), a, d, s);
    let k4 = riccati_rhs_with(&(p + &k3 * h), a, d, s);
    symmetrized(p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Classical RK4 integration of the Riccati equation. Returns `n_steps + 1`
/// matrices, the first being `p0`.
pub fn integrate_riccati(
    p0: &DMatrix<f64>,
    linear: &LinearModelSpec,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    check_len("rows of P0", linear.nx(), p0.nrows())?;
    check_len("columns of P0", linear.nx(), p0.ncols())?;
    let s = information_matrix(linear)?;
    let d = linear.diffusion_tensor();
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut p = symmetrized(p0.clone());
    out.push(p.clone());
    for n in 0..n_steps {
        p = rk4_step(&p, dt, &linear.a_matrix, &d, &s);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: n + 1,
                reason: "non-finite Riccati solution".into(),
            });
        }
        out.push(p.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryRiccati {
    pub p_inf: DMatrix<f64>,
    /// `‖riccati_rhs(P∞)‖_F`.
    pub residual: f64,
    pub iterations: usize,
    /// False when `(A, H)` is not observable or `(A, C)` not controllable;
    /// uniqueness of the stabilizing solution is then not guaranteed.
    pub rank_conditions_hold: bool,
}

/// Integrates the Riccati equation from `P₀ = I` until
/// `‖rhs‖_F ≤ tol (1 + ‖P‖_F)`.
pub fn stationary_riccati(
    linear: &LinearModelSpec,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryRiccati> {
    let nx = linear.nx();
    let s = information_matrix(linear)?;
    let d = linear.diffusion_tensor();
    let a = &linear.a_matrix;
    let a_norm = frobenius_norm(a);
    let s_norm = frobenius_norm(&s);
    let mut p = DMatrix::<f64>::identity(nx, nx);
    let mut residual = f64::INFINITY;
    for iter in 0..max_iter {
        let rhs = riccati_rhs_with(&p, a, &d, &s);
        residual = frobenius_norm(&rhs);
        if residual <= tol * (1.0 + frobenius_norm(&p)) {
            return Ok(StationaryRiccati {
                p_inf: p,
                residual,
                iterations: iter,
                rank_conditions_hold: observability_rank(linear) == nx
                    && controllability_rank(linear) == nx,
            });
        }
        // Keeps h times the local Jacobian scale well inside the RK4
        // stability region.
        let h = (0.5 / (a_norm + frobenius_norm(&p) * s_norm + 1e-300)).min(10.0);
        p = rk4_step(&p, h, a, &d, &s);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: iter + 1,
                reason: "non-finite iterate in stationary Riccati solve".into(),
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Smallest decay rate `min -Re λ(A - P Hᵀ R⁻¹ H)` of the filter error
/// dynamics.
pub fn error_decay_rate(p: &DMatrix<f64>, linear: &LinearModelSpec) -> Result<f64> {
    let s = information_matrix(linear)?;
    let closed = &linear.a_matrix - p * s;
    let eig = closed.complex_eigenvalues();
    Ok(eig.iter().map(|z| -z.re).fold(f64::INFINITY, f64::min))
}

/// One Euler step of the Kalman-Bucy mean and covariance:
/// `mean + dt (A mean + b) - P Hᵀ R⁻¹ (dt H mean - dy)`,
/// `cov + dt riccati_rhs(cov)`.
pub fn kbf_mean_step(
    belief: &GaussianBelief,
    linear: &LinearModelSpec,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<GaussianBelief> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    check_len("observation increment", linear.ny(), dy.len())?;
    check_len("mean", linear.nx(), belief.mean.len())?;
    if linear.h_matrix.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("forward operator H must be nonzero"));
    }
    let h = &linear.h_matrix;
    let rinv = linear.obs_cov_inv()?;
    let gain = &belief.cov * h.transpose() * rinv;
    let innovation = h * &belief.mean * dt - dy;
    let drift = &linear.a_matrix * &belief.mean + &linear.b_vector;
    let mean = &belief.mean + drift * dt - gain * innovation;
    let cov = symmetrized(&belief.cov + riccati_rhs(&belief.cov, linear)? * dt);
    Ok(GaussianBelief { mean, cov })
}

/// Rank of `[H; HA; …; HA^{nx-1}]`.
pub fn observability_rank(linear: &LinearModelSpec) -> usize {
    let nx = linear.nx();
    let ny = linear.ny();
    let mut stacked = DMatrix::zeros(ny * nx, nx);
    let mut block = linear.h_matrix.clone();
    for k in 0..nx {
        stacked.view_mut((k * ny, 0), (ny, nx)).copy_from(&block);
        block = &block * &linear.a_matrix;
    }
    numerical_rank(&stacked, RANK_REL_TOL)
}

/// Rank of `[C, AC, …, A^{nx-1}C]`.
pub fn controllability_rank(linear: &LinearModelSpec) -> usize {
    let nx = linear.nx();
    let nw = linear.diffusion_factor.ncols();
    let mut stacked = DMatrix::zeros(nx, nw * nx);
    let mut block = linear.diffusion_factor.clone();
    for k in 0..nx {
        stacked.view_mut((0, k * nw), (nx, nw)).copy_from(&block);
        block = &linear.a_matrix * &block;
    }
    numerical_rank(&stacked, RANK_REL_TOL)
}

/// Summary printed by the `riccati` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiReport {
    /// Row-major `P∞`.
    pub p_inf: Vec<Vec<f64>>,
    pub residual: f64,
    pub lambda_star: f64,
    pub observability_rank: usize,
    pub controllability_rank: usize,
    pub nx: usize,
    pub iterations: usize,
}

pub fn riccati_report(
    linear: &LinearModelSpec,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiReport> {
    let sol = stationary_riccati(linear, tol, max_iter)?;
    let p = &sol.p_inf;
    Ok(RiccatiReport {
        p_inf: p.row_iter().map(|r| r.iter().copied().collect()).collect(),
        residual: sol.residual,
        lambda_star: error_decay_rate(p, linear)?,
        observability_rank: observability_rank(linear),
        controllability_rank: controllability_rank(linear),
        nx: linear.nx(),
        iterations: sol.iterations,
    })
}

/// True when all eigenvalues of `p` are at least `-tol`.
pub fn is_psd(p: &DMatrix<f64>, tol: f64) -> bool {
    sym_eigen(p).eigenvalues.min() >= -tol
}
