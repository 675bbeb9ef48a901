//! Reference ("truth") trajectories and synthetic observation increments for
//! twin experiments.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::diagnostics::format_full;
use crate::linalg::{require_symmetric, sym_eigen};
use crate::model::{check_len, ModelSpec};
use crate::rng::{standard_normal_vector, stream_rng, OBSERVATION_STREAM, SIGNAL_STREAM};
use crate::{Error, Result};

/// Reference states on a uniform grid plus the observation increments over
/// each grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPath {
    pub dt: f64,
    /// `n_steps + 1` states, `states[0]` is the initial condition.
    pub states: Vec<DVector<f64>>,
    /// `ΔY_n` over `[t_n, t_{n+1}]`, `n_steps` entries.
    pub obs_increments: Vec<DVector<f64>>,
    pub seed: u64,
}

impl TruthPath {
    pub fn n_steps(&self) -> usize {
        self.obs_increments.len()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Writes `t,x_1..x_nx,dy_1..dy_ny`; the `dy` cells of the final row are
    /// empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv_to(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let nx = self.states.first().map_or(0, |s| s.len());
        let ny = self.obs_increments.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=nx).map(|k| format!("x_{k}")));
        header.extend((1..=ny).map(|k| format!("dy_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for (n, state) in self.states.iter().enumerate() {
            let mut cells = vec![format_full(self.time(n))];
            cells.extend(state.iter().map(|&v| format_full(v)));
            match self.obs_increments.get(n) {
                Some(dy) => cells.extend(dy.iter().map(|&v| format_full(v))),
                None => cells.extend(std::iter::repeat_n(String::new(), ny)),
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues down to
/// `-1e-12 ‖m‖` are clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_symmetric(m, 1e-10, "matrix")?;
    let scale = m.norm();
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(crate::linalg::symmetrized(s))
}

/// Euler-Maruyama twin-experiment data:
/// `X_{n+1} = X_n + Δt f(X_n) + √2 C ΔW_n`, `ΔY_n = Δt h(X_n) + R^{1/2} ΔB_n`.
///
/// `W` and `B` are drawn from independent streams of `seed`, so the signal
/// path only depends on the seed and not on `R`.
pub fn simulate_truth(
    model: &ModelSpec,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<TruthPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    check_len("initial state", model.nx(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }
    let sqrt_dt = dt.sqrt();
    let noise_gain = model.diffusion_factor() * (2.0_f64.sqrt() * sqrt_dt);
    let obs_gain = sqrt_psd(model.obs_cov())? * sqrt_dt;
    let mut w_rng = stream_rng(seed, SIGNAL_STREAM);
    let mut b_rng = stream_rng(seed, OBSERVATION_STREAM);

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut obs_increments = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    states.push(x.clone());
    for n in 0..n_steps {
        let dw = standard_normal_vector(&mut w_rng, model.nw());
        let db = standard_normal_vector(&mut b_rng, model.ny());
        let dy = model.forward_unchecked(&x) * dt + &obs_gain * db;
        let next = &x + model.drift_unchecked(&x) * dt + &noise_gain * dw;
        if next.iter().any(|v| !v.is_finite()) || dy.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: n + 1,
                reason: "non-finite reference state".into(),
            });
        }
        obs_increments.push(dy);
        states.push(next.clone());
        x = next;
    }
    Ok(TruthPath {
        dt,
        states,
        obs_increments,
        seed,
    })
}
