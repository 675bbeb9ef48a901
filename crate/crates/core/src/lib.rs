//! Continuous-time ensemble Kalman-Bucy filtering laboratory.
//!
//! The crate bundles the deterministic EnKBF particle system ([`enkbf`]), a
//! Kalman-Bucy / Riccati reference ([`kbf`]), a mean-field propagator
//! ([`meanfield`]), per-step diagnostics and bound envelopes
//! ([`diagnostics`]) and a seeded sweep driver ([`experiment`]).

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod enkbf;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod kbf;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod rng;
pub mod truth;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
