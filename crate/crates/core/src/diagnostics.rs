//! Per-step observables and the closed-form bound envelopes for the ensemble
//! spread and the covariance eigenvalues.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::{frobenius_norm, EmpiricalStats};
use crate::linalg::{require_symmetric, sym_eigen};
use crate::model::ModelSpec;
use crate::{Error, Result};

/// Column order of the per-step diagnostics CSV. `e_sq` carries the ½
/// factor: `e_sq = ½‖x_ref - x̄‖²`.
pub const DIAGNOSTICS_HEADER: &str = "t,e_sq,v,lambda_min,lambda_max,frob_p,trace_p";

/// Formats with 17 significant digits.
pub fn format_full(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub e_sq: f64,
    pub v: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub frob_p: f64,
    pub trace_p: f64,
}

impl DiagnosticsRow {
    pub fn from_stats(t: f64, x_ref: &DVector<f64>, stats: &EmpiricalStats) -> Self {
        let eig = sym_eigen(&stats.cov);
        Self {
            t,
            e_sq: estimation_error(x_ref, &stats.mean),
            v: stats.v,
            lambda_min: eig.eigenvalues.min(),
            lambda_max: eig.eigenvalues.max(),
            frob_p: frobenius_norm(&stats.cov),
            trace_p: stats.cov.trace(),
        }
    }

    /// Checks `λ_min ≤ λ_max`, `V = tr P` and `V/√M ≤ ‖P‖_F ≤ V`, each with
    /// slack `rel_slack · V`.
    pub fn satisfies_invariants(&self, m: usize, rel_slack: f64) -> bool {
        let slack = rel_slack * self.v;
        self.lambda_min <= self.lambda_max
            && (self.v - self.trace_p).abs() <= slack
            && self.v / (m as f64).sqrt() <= self.frob_p + slack
            && self.frob_p <= self.v + slack
    }

    pub fn csv_line(&self) -> String {
        [
            self.t,
            self.e_sq,
            self.v,
            self.lambda_min,
            self.lambda_max,
            self.frob_p,
            self.trace_p,
        ]
        .iter()
        .map(|&x| format_full(x))
        .collect::<Vec<_>>()
        .join(",")
    }
}

pub fn write_diagnostics_csv<W: Write>(
    out: &mut W,
    rows: &[DiagnosticsRow],
) -> std::io::Result<()> {
    writeln!(out, "{DIAGNOSTICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

/// `E = ½‖x_ref - mean‖²`.
pub fn estimation_error(x_ref: &DVector<f64>, mean: &DVector<f64>) -> f64 {
    0.5 * (x_ref - mean).norm_squared()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(p: &DMatrix<f64>) -> Result<(f64, f64)> {
    require_symmetric(p, 1e-10, "matrix")?;
    let eig = sym_eigen(p);
    Ok((eig.eigenvalues.min(), eig.eigenvalues.max()))
}

/// Uniform-in-time bound on `V_t`:
/// `max{V₀, λmax(R) L₊ M + √((λmax(R) M L₊)² + 2 λmax(R) M tr D)}`.
pub fn v_upper_bound(v0: f64, l_plus: f64, trace_d: f64, lambda_max_r: f64, m: usize) -> f64 {
    let rm = lambda_max_r * m as f64;
    let fixed = rm * l_plus + ((rm * l_plus).powi(2) + 2.0 * rm * trace_d).sqrt();
    v0.max(fixed)
}

/// Uniform-in-time lower bound on `V_t`:
/// `min{V₀, λmin(R) L₋ + √((λmin(R) L₋)² + 2 λmin(R) λmin(D))}`.
pub fn v_lower_bound(v0: f64, l_minus: f64, lambda_min_d: f64, lambda_min_r: f64) -> f64 {
    let rl = lambda_min_r * l_minus;
    let fixed = rl + (rl * rl + 2.0 * lambda_min_r * lambda_min_d).sqrt();
    v0.min(fixed)
}

/// Local-in-time, `M`-uniform bound `e^{2L₊t}(V₀ + tr D / L₊)`.
pub fn v_local_bound(v0: f64, l_plus: f64, trace_d: f64, t: f64) -> Result<f64> {
    if !(l_plus > 0.0) {
        return Err(Error::invalid(format!(
            "l_plus must be positive, got {l_plus}"
        )));
    }
    if t < 0.0 {
        return Err(Error::invalid(format!("t must be non-negative, got {t}")));
    }
    Ok((2.0 * l_plus * t).exp() * (v0 + trace_d / l_plus))
}

/// Inputs of [`eigenvalue_bound_formulas`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenBoundInputs {
    pub lam0_max: f64,
    pub lam0_min: f64,
    pub f_lip: f64,
    pub m: usize,
    pub nx: usize,
    pub lambda_max_d: f64,
    pub lambda_min_d: f64,
    pub epsilon: f64,
}

/// Fixed-point bounds on the extreme covariance eigenvalues under `R = εI`.
///
/// `λmax ≤ max{λ₀max, ε L √(nx M) + √(ε² L² nx M + 2ε λmax(D))}`; with
/// `C₁ = λmax_bound / √ε`,
/// `λmin ≥ min{λ₀min, -ε^{3/2} L C₁ √(nx M) + √(ε³ L² C₁² nx M + 2ε λmin(D))}`.
pub fn eigenvalue_bound_formulas(inp: &EigenBoundInputs) -> (f64, f64) {
    let eps = inp.epsilon;
    let l = inp.f_lip;
    let nm = (inp.nx * inp.m) as f64;
    let lam_max_bound = inp
        .lam0_max
        .max(eps * l * nm.sqrt() + (eps * eps * l * l * nm + 2.0 * eps * inp.lambda_max_d).sqrt());
    let c1 = lam_max_bound / eps.sqrt();
    let lam_min_bound = inp.lam0_min.min(
        -eps.powf(1.5) * l * c1 * nm.sqrt()
            + (eps.powi(3) * l * l * c1 * c1 * nm + 2.0 * eps * inp.lambda_min_d).sqrt(),
    );
    (lam_max_bound, lam_min_bound)
}

/// Inputs of [`BoundEnvelope::compute`]; everything is caller supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub v0: f64,
    pub l_plus: f64,
    pub l_minus: f64,
    pub trace_d: f64,
    pub lambda_max_r: f64,
    pub lambda_min_r: f64,
    pub eigen: EigenBoundInputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEnvelope {
    pub v_upper: f64,
    pub v_lower: f64,
    pub lam_max_bound: f64,
    pub lam_min_bound: f64,
    pub inputs: BoundInputs,
}

impl BoundEnvelope {
    pub fn compute(inputs: BoundInputs) -> Self {
        let (lam_max_bound, lam_min_bound) = eigenvalue_bound_formulas(&inputs.eigen);
        Self {
            v_upper: v_upper_bound(
                inputs.v0,
                inputs.l_plus,
                inputs.trace_d,
                inputs.lambda_max_r,
                inputs.eigen.m,
            ),
            v_lower: v_lower_bound(
                inputs.v0,
                inputs.l_minus,
                inputs.eigen.lambda_min_d,
                inputs.lambda_min_r,
            ),
            lam_max_bound,
            lam_min_bound,
            inputs,
        }
    }
}

/// Sample estimates of the one-sided dissipativity constants: max and min of
/// `⟨f(x) - f(y), x - y⟩ / ‖x - y‖²` over the supplied pairs. Degenerate
/// pairs are skipped.
pub fn dissipativity_estimate(
    model: &ModelSpec,
    samples: &[(DVector<f64>, DVector<f64>)],
) -> Result<(f64, f64)> {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (x, y) in samples {
        let diff = x - y;
        let dist2 = diff.norm_squared();
        if dist2 == 0.0 {
            continue;
        }
        let q = (model.eval_drift(x)? - model.eval_drift(y)?).dot(&diff) / dist2;
        hi = hi.max(q);
        lo = lo.min(q);
    }
    if hi == f64::NEG_INFINITY {
        return Err(Error::invalid("all sample pairs are degenerate (x = y)"));
    }
    Ok((hi, lo))
}

/// Mean of `series` after dropping the first `⌊burn_in_fraction · len⌋`
/// entries.
pub fn time_average(series: &[f64], burn_in_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::invalid(format!(
            "burn_in_fraction must lie in [0, 1), got {burn_in_fraction}"
        )));
    }
    let skip = (burn_in_fraction * series.len() as f64).floor() as usize;
    let kept = &series[skip.min(series.len())..];
    if kept.is_empty() {
        return Err(Error::invalid("series is empty after burn-in"));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Least-squares line through `(log₁₀ x, log₁₀ y)`; returns
/// `(slope, intercept)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            what: "loglog_slope ys",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::invalid("loglog_slope needs at least two points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(
            "loglog_slope requires positive finite inputs",
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.log10()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid(
            "loglog_slope needs at least two distinct x values",
        ));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModelSpec;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn estimation_error_cases() {
        assert_eq!(estimation_error(&v(&[3.0, 4.0]), &v(&[0.0, 0.0])), 12.5);
        assert_eq!(estimation_error(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])), 0.0);
        assert_eq!(estimation_error(&v(&[-2.0]), &v(&[0.0])), 2.0);
    }

    #[test]
    fn eigen_extremes_cases() {
        let (lo, hi) = eigen_extremes(&DMatrix::from_diagonal(&v(&[3.0, 1.0]))).unwrap();
        assert_eq!((lo, hi), (1.0, 3.0));
        let (lo, hi) =
            eigen_extremes(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 3.0).abs() < 1e-14);
        assert_eq!(eigen_extremes(&DMatrix::zeros(2, 2)).unwrap(), (0.0, 0.0));
        assert!(eigen_extremes(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn v_upper_bound_cases() {
        assert!((v_upper_bound(0.0, 0.0, 2.0, 1.0, 2) - 8.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(v_upper_bound(100.0, 0.0, 2.0, 1.0, 2), 100.0);
        assert_eq!(v_upper_bound(0.0, 0.0, 0.0, 1.0, 2), 0.0);
    }

    #[test]
    fn v_lower_below_upper() {
        let up = v_upper_bound(1.0, 2.0, 3.0, 0.5, 4);
        let lo = v_lower_bound(1.0, -1.0, 1.0, 0.5);
        assert!(lo <= up);
    }

    #[test]
    fn v_local_bound_cases() {
        assert_eq!(v_local_bound(2.0, 0.5, 1.0, 0.0).unwrap(), 4.0);
        let b = v_local_bound(1.0, 1.0, 1.0, 2.0_f64.ln()).unwrap();
        assert!((b - 8.0).abs() < 1e-12);
        assert_eq!(v_local_bound(0.0, 1.0, 0.0, 3.0).unwrap(), 0.0);
        assert!(v_local_bound(1.0, 0.0, 1.0, 1.0).is_err());
    }

    fn eig_inputs(f_lip: f64, eps: f64) -> EigenBoundInputs {
        EigenBoundInputs {
            lam0_max: 0.0,
            lam0_min: 0.0,
            f_lip,
            m: 4,
            nx: 3,
            lambda_max_d: 1.0,
            lambda_min_d: 1.0,
            epsilon: eps,
        }
    }

    #[test]
    fn eigen_bounds_without_lipschitz_term() {
        let (hi, lo) = eigenvalue_bound_formulas(&eig_inputs(0.0, 0.01));
        assert!((hi - 0.02_f64.sqrt()).abs() < 1e-15);
        assert_eq!(lo, 0.0); // min with lam0_min = 0

        let mut inp = eig_inputs(0.0, 0.01);
        inp.lam0_max = 10.0;
        inp.lam0_min = 10.0;
        inp.lambda_max_d = 2.0;
        inp.lambda_min_d = 0.5;
        let (hi, lo) = eigenvalue_bound_formulas(&inp);
        assert_eq!(hi, 10.0);
        assert!((lo - (2.0 * 0.01 * 0.5_f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn eigen_bounds_scale_with_sqrt_eps() {
        let mut ratios = Vec::new();
        for eps in [1e-4, 1e-6, 1e-8] {
            let (hi, _) = eigenvalue_bound_formulas(&eig_inputs(5.0, eps));
            ratios.push(hi / eps.sqrt());
        }
        assert!(ratios.iter().all(|r| r.is_finite() && *r < 2.0));
        let (hi, lo) = eigenvalue_bound_formulas(&eig_inputs(5.0, 1e-12));
        assert!(hi < 1e-5 && lo <= hi);
    }

    #[test]
    fn dissipativity_cases() {
        let neg = LinearModelSpec::new(
            -DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
        .to_model()
        .unwrap();
        let pairs = vec![
            (v(&[1.0, 2.0]), v(&[0.0, -1.0])),
            (v(&[5.0, 0.0]), v(&[0.0, 3.0])),
        ];
        assert_eq!(dissipativity_estimate(&neg, &pairs).unwrap(), (-1.0, -1.0));

        let sym = LinearModelSpec::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
        .to_model()
        .unwrap();
        let eig = vec![
            (v(&[1.0, 1.0]), v(&[0.0, 0.0])),
            (v(&[1.0, -1.0]), v(&[0.0, 0.0])),
        ];
        let (hi, lo) = dissipativity_estimate(&sym, &eig).unwrap();
        assert!((hi - 3.0).abs() < 1e-14 && (lo - 1.0).abs() < 1e-14);

        let (hi, lo) = dissipativity_estimate(&sym, &eig[..1]).unwrap();
        assert_eq!(hi, lo);

        let degenerate = vec![(v(&[1.0, 1.0]), v(&[1.0, 1.0]))];
        assert!(dissipativity_estimate(&sym, &degenerate).is_err());
    }

    #[test]
    fn time_average_cases() {
        assert_eq!(time_average(&[1.0, 2.0, 3.0], 1.0 / 3.0).unwrap(), 2.5);
        assert_eq!(time_average(&[4.0; 10], 0.1).unwrap(), 4.0);
        assert_eq!(time_average(&[2.0, 4.0], 0.0).unwrap(), 3.0);
        assert!(time_average(&[], 0.0).is_err());
        assert!(time_average(&[1.0], 1.0).is_err());
    }

    #[test]
    fn loglog_slope_cases() {
        let (s, _) = loglog_slope(&[0.01, 0.1, 1.0], &[0.1, 0.316_227_8, 1.0]).unwrap();
        assert!((s - 0.5).abs() < 1e-6);
        let (s, _) = loglog_slope(&[1.0, 2.0, 4.0], &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(s, 0.0);
        let (s, i) = loglog_slope(&[1.0, 10.0, 100.0], &[1.0, 10.0, 100.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-14 && i.abs() < 1e-14);
        assert!(loglog_slope(&[1.0, -1.0], &[1.0, 1.0]).is_err());
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn csv_has_seven_columns() {
        let row = DiagnosticsRow {
            t: 0.1,
            e_sq: 1.0,
            v: 2.0,
            lambda_min: 0.5,
            lambda_max: 1.5,
            frob_p: 1.6,
            trace_p: 2.0,
        };
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), DIAGNOSTICS_HEADER);
        let cells: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|c| c.parse().unwrap())
            .collect();
        assert_eq!(cells, vec![0.1, 1.0, 2.0, 0.5, 1.5, 1.6, 2.0]);
        assert!(row.satisfies_invariants(2, 1e-10));
    }
}
