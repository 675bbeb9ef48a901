//! Particle ensembles and their empirical moment closures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{require_symmetric, sym_eigen, symmetrize_in_place, symmetrized};
use crate::model::ModelSpec;
use crate::rng::standard_normal_matrix;
use crate::{Error, Result};

/// Default relative eigenvalue cutoff of [`pseudo_inverse`].
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-12;

/// `M` particles stored column-wise in an `nx x M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: DMatrix<f64>,
    pub t: f64,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>, t: f64) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(Error::invalid(format!(
                "ensemble size must be at least 2, got {}",
                particles.ncols()
            )));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ensemble contains non-finite entries"));
        }
        Ok(Self { particles, t })
    }

    pub fn from_columns(columns: &[DVector<f64>], t: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("ensemble size must be at least 2, got 0"));
        }
        Self::new(DMatrix::from_columns(columns), t)
    }

    /// Draws `m` particles `mean + L z`, `z ~ N(0, I)`, where `L` is any
    /// factor with `L Lᵀ` equal to the target covariance.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        mean: &DVector<f64>,
        cov_factor: &DMatrix<f64>,
        m: usize,
    ) -> Result<Self> {
        let z = standard_normal_matrix(rng, cov_factor.ncols(), m);
        let mut particles = cov_factor * z;
        for mut col in particles.column_iter_mut() {
            col += mean;
        }
        Self::new(particles, 0.0)
    }

    /// Rescales the ensemble so its empirical mean and covariance equal
    /// `mean` and `cov` exactly (up to rounding). Requires a full-rank
    /// empirical covariance.
    pub fn with_exact_moments(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let stats = EmpiricalStats::from_particles(&self.particles, None);
        let current = stats
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("ensemble covariance is singular"))?;
        let target = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("target covariance is not positive definite"))?;
        let whiten = current
            .l()
            .solve_lower_triangular(&DMatrix::identity(self.nx(), self.nx()))
            .ok_or_else(|| Error::invalid("ensemble covariance is singular"))?;
        let map = target.l() * whiten;
        let mut particles = DMatrix::zeros(self.nx(), self.m());
        for (i, col) in self.particles.column_iter().enumerate() {
            let dev = col - &stats.mean;
            particles.set_column(i, &(&map * dev + mean));
        }
        Self::new(particles, self.t)
    }

    pub fn nx(&self) -> usize {
        self.particles.nrows()
    }

    pub fn m(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.particles.column(i).into_owned()
    }
}

/// Empirical moments of an ensemble, all second moments normalized by
/// `1/(M-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub h_mean: DVector<f64>,
    pub cross_cov: DMatrix<f64>,
    /// Spread `V = Σ‖Xᵢ - x̄‖² / (M-1)`.
    pub v: f64,
}

impl EmpiricalStats {
    /// Moments from particle columns and, optionally, their images under `h`.
    /// Without `hx` the forward map is taken as the identity.
    pub(crate) fn from_particles(particles: &DMatrix<f64>, hx: Option<&DMatrix<f64>>) -> Self {
        let nx = particles.nrows();
        let m = particles.ncols();
        let inv_m = 1.0 / m as f64;
        let norm = 1.0 / (m as f64 - 1.0);

        let mut mean = DVector::zeros(nx);
        for col in particles.column_iter() {
            mean += col;
        }
        mean *= inv_m;

        let mut cov = DMatrix::zeros(nx, nx);
        let mut v = 0.0;
        let mut dev = DVector::zeros(nx);
        for col in particles.column_iter() {
            dev.copy_from(&col);
            dev -= &mean;
            cov.ger(1.0, &dev, &dev, 1.0);
            v += dev.norm_squared();
        }
        cov *= norm;
        symmetrize_in_place(&mut cov);
        v *= norm;

        let (h_mean, cross_cov) = match hx {
            None => (mean.clone(), cov.clone()),
            Some(hx) => {
                let ny = hx.nrows();
                let mut h_mean = DVector::zeros(ny);
                for col in hx.column_iter() {
                    h_mean += col;
                }
                h_mean *= inv_m;
                let mut cross = DMatrix::zeros(nx, ny);
                let mut hdev = DVector::zeros(ny);
                for (col, hcol) in particles.column_iter().zip(hx.column_iter()) {
                    dev.copy_from(&col);
                    dev -= &mean;
                    hdev.copy_from(&hcol);
                    hdev -= &h_mean;
                    cross.ger(1.0, &dev, &hdev, 1.0);
                }
                cross *= norm;
                (h_mean, cross)
            }
        };
        Self {
            mean,
            cov,
            h_mean,
            cross_cov,
            v,
        }
    }
}

/// Images `h(Xᵢ)` as columns, or `None` for the identity map.
pub(crate) fn forward_images(ens: &Ensemble, model: &ModelSpec) -> Option<DMatrix<f64>> {
    if model.has_identity_forward_map() {
        return None;
    }
    let mut hx = DMatrix::zeros(model.ny(), ens.m());
    for (i, col) in ens.particles.column_iter().enumerate() {
        hx.set_column(i, &model.forward_unchecked(&col.into_owned()));
    }
    Some(hx)
}

pub fn empirical_stats(ens: &Ensemble, model: &ModelSpec) -> Result<EmpiricalStats> {
    if ens.m() < 2 {
        return Err(Error::invalid(format!(
            "ensemble size must be at least 2, got {}",
            ens.m()
        )));
    }
    if ens.nx() != model.nx() {
        return Err(Error::DimensionMismatch {
            what: "ensemble state",
            expected: model.nx(),
            got: ens.nx(),
        });
    }
    let hx = forward_images(ens, model);
    Ok(EmpiricalStats::from_particles(&ens.particles, hx.as_ref()))
}

/// Eigendecomposition-based Moore-Penrose inverse of a symmetric PSD matrix.
/// Eigenvalues at or below `rel_tol * λ_max` are treated as zero.
pub fn pseudo_inverse(p: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::invalid(format!(
            "rel_tol must lie in (0, 1), got {rel_tol}"
        )));
    }
    require_symmetric(p, 1e-10, "matrix")?;
    Ok(pseudo_inverse_unchecked(p, rel_tol))
}

pub(crate) fn pseudo_inverse_unchecked(p: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = p.nrows();
    let eig = sym_eigen(p);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return DMatrix::zeros(n, n);
    }
    let cut = rel_tol * lmax;
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cut {
            let u = eig.eigenvectors.column(k);
            out.ger(1.0 / l, &u, &u, 1.0);
        }
    }
    symmetrized(out)
}

pub fn frobenius_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
