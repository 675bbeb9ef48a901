//! Filtering problems: signal drift, diffusion factor, forward map and
//! observation-noise covariance.
//!
//! The signal follows `dX = f(X) dt + √2 C dW` and the observations
//! `dY = h(X) dt + R^{1/2} dB`, so the diffusion tensor is `D = C Cᵀ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{is_identity, require_symmetric, sym_eigen, symmetrized};
use crate::{Error, Result};

/// A state- or observation-valued map.
pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    nx: usize,
    ny: usize,
    nw: usize,
    drift: VectorField,
    diffusion_factor: DMatrix<f64>,
    forward_map: VectorField,
    obs_cov: DMatrix<f64>,
    // Cached derived quantities.
    diffusion: DMatrix<f64>,
    obs_cov_inv: DMatrix<f64>,
    identity_forward_map: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("nw", &self.nw)
            .field("diffusion_factor", &self.diffusion_factor)
            .field("obs_cov", &self.obs_cov)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Builds a model, validating dimensions and that `obs_cov` is SPD.
    ///
    /// `identity_forward_map` declares that `forward_map` is `h(x) = x`; it is
    /// what enables the fully observed filtering scheme.
    pub fn new(
        name: impl Into<String>,
        drift: VectorField,
        diffusion_factor: DMatrix<f64>,
        forward_map: VectorField,
        obs_cov: DMatrix<f64>,
        identity_forward_map: bool,
    ) -> Result<Self> {
        let nx = diffusion_factor.nrows();
        let nw = diffusion_factor.ncols();
        let ny = obs_cov.nrows();
        if nx == 0 || nw == 0 || ny == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if identity_forward_map && nx != ny {
            return Err(Error::DimensionMismatch {
                what: "identity forward map",
                expected: nx,
                got: ny,
            });
        }
        require_symmetric(&obs_cov, 1e-12, "observation covariance R")?;
        let min_eig = sym_eigen(&obs_cov).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::invalid(format!(
                "observation covariance R must be positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let obs_cov = symmetrized(obs_cov);
        let obs_cov_inv = obs_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("observation covariance R is not positive definite"))?
            .inverse();
        let diffusion = symmetrized(&diffusion_factor * diffusion_factor.transpose());
        Ok(Self {
            name: name.into(),
            nx,
            ny,
            nw,
            drift,
            diffusion_factor,
            forward_map,
            obs_cov,
            diffusion,
            obs_cov_inv: symmetrized(obs_cov_inv),
            identity_forward_map,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nw(&self) -> usize {
        self.nw
    }

    pub fn diffusion_factor(&self) -> &DMatrix<f64> {
        &self.diffusion_factor
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    pub fn obs_cov_inv(&self) -> &DMatrix<f64> {
        &self.obs_cov_inv
    }

    /// `D = C Cᵀ`, symmetrized after the product.
    pub fn diffusion_tensor(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    pub fn has_identity_forward_map(&self) -> bool {
        self.identity_forward_map
    }

    /// Returns `ε` when the model is fully observed with `h(x) = x` and
    /// `R = ε I`.
    pub fn fully_observed_epsilon(&self) -> Option<f64> {
        if !self.identity_forward_map {
            return None;
        }
        let eps = self.obs_cov[(0, 0)];
        let scaled = DMatrix::<f64>::identity(self.ny, self.ny) * eps;
        (self.obs_cov == scaled).then_some(eps)
    }

    pub fn eval_drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("state", self.nx, x.len())?;
        Ok((self.drift)(x))
    }

    pub fn eval_forward_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("state", self.nx, x.len())?;
        Ok((self.forward_map)(x))
    }

    /// Unchecked drift evaluation for inner loops that already validated sizes.
    pub(crate) fn drift_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub(crate) fn forward_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.identity_forward_map {
            x.clone()
        } else {
            (self.forward_map)(x)
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// `f(x) = A x + b`, `h(x) = H x`. Keeps the matrices for the Kalman-Bucy
/// reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelSpec {
    pub a_matrix: DMatrix<f64>,
    pub b_vector: DVector<f64>,
    pub h_matrix: DMatrix<f64>,
    pub diffusion_factor: DMatrix<f64>,
    pub obs_cov: DMatrix<f64>,
}

impl LinearModelSpec {
    pub fn new(
        a_matrix: DMatrix<f64>,
        b_vector: DVector<f64>,
        h_matrix: DMatrix<f64>,
        diffusion_factor: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let nx = a_matrix.nrows();
        if !a_matrix.is_square() {
            return Err(Error::invalid("A must be square"));
        }
        check_len("b", nx, b_vector.len())?;
        check_len("columns of H", nx, h_matrix.ncols())?;
        check_len("rows of C", nx, diffusion_factor.nrows())?;
        check_len("size of R", h_matrix.nrows(), obs_cov.nrows())?;
        check_len("size of R", h_matrix.nrows(), obs_cov.ncols())?;
        let spec = Self {
            a_matrix,
            b_vector,
            h_matrix,
            diffusion_factor,
            obs_cov,
        };
        // Validates R.
        spec.to_model()?;
        Ok(spec)
    }

    /// Scalar model `dX = a X dt + √(2d) dW`, `dY = h X dt + √r dB`.
    pub fn scalar(a: f64, d: f64, h: f64, r: f64) -> Result<Self> {
        if d < 0.0 {
            return Err(Error::invalid("diffusion d must be non-negative"));
        }
        Self::new(
            DMatrix::from_element(1, 1, a),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, d.sqrt()),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn nx(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn ny(&self) -> usize {
        self.h_matrix.nrows()
    }

    pub fn diffusion_tensor(&self) -> DMatrix<f64> {
        symmetrized(&self.diffusion_factor * self.diffusion_factor.transpose())
    }

    pub fn obs_cov_inv(&self) -> Result<DMatrix<f64>> {
        self.obs_cov
            .clone()
            .cholesky()
            .map(|c| symmetrized(c.inverse()))
            .ok_or_else(|| Error::invalid("observation covariance R is not positive definite"))
    }

    /// Same model with `R` replaced.
    pub fn with_obs_cov(&self, obs_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a_matrix.clone(),
            self.b_vector.clone(),
            self.h_matrix.clone(),
            self.diffusion_factor.clone(),
            obs_cov,
        )
    }

    pub fn to_model(&self) -> Result<ModelSpec> {
        let a = self.a_matrix.clone();
        let b = self.b_vector.clone();
        let h = self.h_matrix.clone();
        let identity = is_identity(&h);
        ModelSpec::new(
            "linear",
            Arc::new(move |x: &DVector<f64>| &a * x + &b),
            self.diffusion_factor.clone(),
            Arc::new(move |x: &DVector<f64>| &h * x),
            self.obs_cov.clone(),
            identity,
        )
    }
}

/// Lorenz-63 drift with the classical parameters (10, 28, 8/3).
pub fn lorenz63_drift(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        10.0 * (x[1] - x[0]),
        (28.0 - x[2]) * x[0] - x[1],
        x[0] * x[1] - 8.0 / 3.0 * x[2],
    ])
}

/// Stochastically perturbed, fully observed Lorenz-63: `C = I₃`, `h(x) = x`,
/// `R = ε I₃`.
pub fn lorenz63_model(epsilon: f64) -> Result<ModelSpec> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    ModelSpec::new(
        "lorenz63",
        Arc::new(lorenz63_drift),
        DMatrix::identity(3, 3),
        Arc::new(|x: &DVector<f64>| x.clone()),
        DMatrix::identity(3, 3) * epsilon,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn lorenz_origin_is_fixed_point() {
        let m = lorenz63_model(0.1).unwrap();
        assert_eq!(
            m.eval_drift(&v(&[0.0, 0.0, 0.0])).unwrap(),
            v(&[0.0, 0.0, 0.0])
        );
    }

    #[test]
    fn lorenz_drift_by_hand() {
        let m = lorenz63_model(0.1).unwrap();
        let out = m.eval_drift(&v(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 26.0);
        assert!((out[2] + 5.0 / 3.0).abs() < 1e-15);

        let out = m.eval_drift(&v(&[-10.0, 5.0, 28.0])).unwrap();
        assert_eq!(out[0], 150.0);
        assert_eq!(out[1], -5.0);
        assert!((out[2] + 124.666_666_666_666_67).abs() < 1e-12);
    }

    #[test]
    fn lorenz_model_structure() {
        let m = lorenz63_model(0.1).unwrap();
        assert_eq!((m.nx(), m.ny(), m.nw()), (3, 3, 3));
        assert_eq!(m.obs_cov(), &(DMatrix::identity(3, 3) * 0.1));
        assert_eq!(m.diffusion_tensor(), &DMatrix::identity(3, 3));
        assert_eq!(
            m.eval_forward_map(&v(&[1.0, 2.0, 3.0])).unwrap(),
            v(&[1.0, 2.0, 3.0])
        );
        assert_eq!(m.fully_observed_epsilon(), Some(0.1));
    }

    #[test]
    fn lorenz_rejects_bad_epsilon() {
        assert!(lorenz63_model(0.0).is_err());
        assert!(lorenz63_model(-1.0).is_err());
        assert!(lorenz63_model(f64::NAN).is_err());
    }

    #[test]
    fn lorenz_matches_hand_coded_components() {
        let m = lorenz63_model(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (x1, x2, x3): (f64, f64, f64) = (
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-10.0..50.0),
            );
            let out = m.eval_drift(&v(&[x1, x2, x3])).unwrap();
            assert_eq!(out[0], 10.0 * (x2 - x1));
            assert_eq!(out[1], (28.0 - x3) * x1 - x2);
            assert_eq!(out[2], x1 * x2 - 8.0 / 3.0 * x3);
        }
    }

    #[test]
    fn linear_drift_and_dimension_check() {
        let lin = LinearModelSpec::new(
            -DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let m = lin.to_model().unwrap();
        assert_eq!(m.eval_drift(&v(&[2.0, -3.0])).unwrap(), v(&[-2.0, 3.0]));
        assert!(matches!(
            m.eval_drift(&v(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.has_identity_forward_map());
    }

    #[test]
    fn diffusion_tensor_cases() {
        let col = LinearModelSpec::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let m = col.to_model().unwrap();
        assert_eq!(m.nw(), 1);
        assert_eq!(
            m.diffusion_tensor(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])
        );

        let zero = LinearModelSpec::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(
            zero.to_model().unwrap().diffusion_tensor(),
            &DMatrix::zeros(2, 2)
        );
    }

    #[test]
    fn diffusion_tensor_symmetric_psd_for_builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = [
            lorenz63_model(0.01).unwrap(),
            LinearModelSpec::new(
                DMatrix::zeros(3, 3),
                DVector::zeros(3),
                DMatrix::identity(3, 3),
                DMatrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7),
                DMatrix::identity(3, 3),
            )
            .unwrap()
            .to_model()
            .unwrap(),
        ];
        for m in &models {
            let d = m.diffusion_tensor();
            assert_eq!(d, &d.transpose());
            for _ in 0..100 {
                let u = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)).normalize();
                assert!((u.transpose() * d * &u)[(0, 0)] >= -1e-15);
            }
        }
    }

    #[test]
    fn rejects_indefinite_obs_cov() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LinearModelSpec::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            r
        )
        .is_err());
    }

    #[test]
    fn drift_is_deterministic() {
        let m = lorenz63_model(0.5).unwrap();
        let x = v(&[1.3, -2.7, 20.1]);
        assert_eq!(m.eval_drift(&x).unwrap(), m.eval_drift(&x).unwrap());
    }
}
