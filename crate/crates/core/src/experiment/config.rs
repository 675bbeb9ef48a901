//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; string values may be
//! quoted; arrays are comma separated and matrices are given row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::model::{lorenz63_model, LinearModelSpec, ModelSpec};
use crate::{Error, Result};

pub const DEFAULT_EPSILONS: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
pub const DEFAULT_DT: f64 = 2e-4;
pub const DEFAULT_N_STEPS: usize = 500_000;
pub const DEFAULT_M: usize = 4;
pub const DEFAULT_N_SEEDS: usize = 3;
pub const DEFAULT_BURN_IN: f64 = 0.1;
pub const DEFAULT_MASTER_SEED: u64 = 20_180_101;
pub const DEFAULT_OUTPUT_DIR: &str = "enkbf-out";
/// Initial particle spread is `init_scale · √ε` around `x0`.
pub const DEFAULT_INIT_SCALE: f64 = 10.0;
/// Thinning used for time averages when `record_every` is not set.
pub const DEFAULT_RECORD_EVERY: usize = 10;
pub const LORENZ_X0: [f64; 3] = [1.0, 1.0, 1.0];

const KNOWN_KEYS: &[&str] = &[
    "model",
    "epsilon_list",
    "m",
    "m_list",
    "dt",
    "n_steps",
    "record_every",
    "burn_in_fraction",
    "master_seed",
    "n_seeds",
    "output_dir",
    "x0",
    "init_scale",
    "A",
    "b",
    "H",
    "C",
    "R",
];
const LINEAR_KEYS: &[&str] = &["A", "b", "H", "C", "R"];

/// Linear model matrices as read from the config. `R` is scaled by `ε` when
/// the model is instantiated.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    Lorenz63,
    Linear(LinearParams),
}

impl ModelChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModelChoice::Lorenz63 => "lorenz63",
            ModelChoice::Linear(_) => "linear",
        }
    }

    pub fn nx(&self) -> usize {
        match self {
            ModelChoice::Lorenz63 => 3,
            ModelChoice::Linear(p) => p.a.nrows(),
        }
    }

    /// Linear model with observation covariance `ε R`.
    pub fn linear_spec(&self, epsilon: f64) -> Result<Option<LinearModelSpec>> {
        match self {
            ModelChoice::Lorenz63 => Ok(None),
            ModelChoice::Linear(p) => {
                if !(epsilon > 0.0) {
                    return Err(Error::invalid(format!(
                        "epsilon must be positive, got {epsilon}"
                    )));
                }
                LinearModelSpec::new(
                    p.a.clone(),
                    p.b.clone(),
                    p.h.clone(),
                    p.c.clone(),
                    &p.r * epsilon,
                )
                .map(Some)
            }
        }
    }

    pub fn build(&self, epsilon: f64) -> Result<ModelSpec> {
        match self {
            ModelChoice::Lorenz63 => lorenz63_model(epsilon),
            ModelChoice::Linear(_) => self
                .linear_spec(epsilon)?
                .expect("linear choice yields a linear spec")
                .to_model(),
        }
    }

    pub fn default_x0(&self) -> DVector<f64> {
        match self {
            ModelChoice::Lorenz63 => DVector::from_column_slice(&LORENZ_X0),
            ModelChoice::Linear(p) => DVector::zeros(p.a.nrows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub dt: f64,
    pub n_steps: usize,
    pub m: usize,
    pub epsilon_list: Vec<f64>,
    pub m_list: Option<Vec<usize>>,
    pub master_seed: u64,
    pub n_seeds: usize,
    pub burn_in_fraction: f64,
    pub output_dir: PathBuf,
    /// Explicit diagnostic thinning; when set, per-cell diagnostics are
    /// also written.
    pub record_every: Option<usize>,
    pub x0: Option<Vec<f64>>,
    pub init_scale: f64,
}

impl ExperimentConfig {
    pub fn with_model(model: ModelChoice) -> Self {
        Self {
            model,
            dt: DEFAULT_DT,
            n_steps: DEFAULT_N_STEPS,
            m: DEFAULT_M,
            epsilon_list: DEFAULT_EPSILONS.to_vec(),
            m_list: None,
            master_seed: DEFAULT_MASTER_SEED,
            n_seeds: DEFAULT_N_SEEDS,
            burn_in_fraction: DEFAULT_BURN_IN,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            record_every: None,
            x0: None,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    pub fn effective_record_every(&self) -> usize {
        self.record_every.unwrap_or(DEFAULT_RECORD_EVERY)
    }

    pub fn x0_vector(&self) -> DVector<f64> {
        match &self.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => self.model.default_x0(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_list.is_empty() {
            return Err(Error::config("epsilon_list", "must not be empty"));
        }
        if let Some(bad) = self
            .epsilon_list
            .iter()
            .find(|&&e| !(e > 0.0) || !e.is_finite())
        {
            return Err(Error::config(
                "epsilon_list",
                format!("entries must be positive and finite, got {bad}"),
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be positive"));
        }
        if self.m < 2 {
            return Err(Error::config(
                "m",
                format!("must be at least 2, got {}", self.m),
            ));
        }
        if let Some(list) = &self.m_list {
            if list.is_empty() {
                return Err(Error::config("m_list", "must not be empty"));
            }
            if let Some(bad) = list.iter().find(|&&m| m < 2) {
                return Err(Error::config(
                    "m_list",
                    format!("entries must be at least 2, got {bad}"),
                ));
            }
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::config("burn_in_fraction", "must lie in [0, 1)"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::config("init_scale", "must be non-negative"));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != self.model.nx() {
                return Err(Error::config(
                    "x0",
                    format!("expected {} entries, got {}", self.model.nx(), x0.len()),
                ));
            }
        }
        // Builds the model once so that invalid matrices surface here.
        self.model
            .build(self.epsilon_list[0])
            .map_err(|e| Error::config("model", e.to_string()))?;
        Ok(())
    }

    /// Renders the effective configuration in the same format
    /// [`parse_config_str`] reads.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "model = \"{}\"", self.model.name());
        if let ModelChoice::Linear(p) = &self.model {
            let row_major = |m: &DMatrix<f64>| {
                let mut it = m
                    .transpose()
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .into_iter();
                join(&mut it)
            };
            let _ = writeln!(out, "A = {}", row_major(&p.a));
            let _ = writeln!(
                out,
                "b = {}",
                join(&mut p.b.iter().map(|v| format!("{v:?}")))
            );
            let _ = writeln!(out, "H = {}", row_major(&p.h));
            let _ = writeln!(out, "C = {}", row_major(&p.c));
            let _ = writeln!(out, "R = {}", row_major(&p.r));
        }
        let _ = writeln!(
            out,
            "epsilon_list = {}",
            join(&mut self.epsilon_list.iter().map(|v| format!("{v:?}")))
        );
        let _ = writeln!(out, "m = {}", self.m);
        if let Some(list) = &self.m_list {
            let _ = writeln!(
                out,
                "m_list = {}",
                join(&mut list.iter().map(|v| v.to_string()))
            );
        }
        let _ = writeln!(out, "dt = {:?}", self.dt);
        let _ = writeln!(out, "n_steps = {}", self.n_steps);
        if let Some(k) = self.record_every {
            let _ = writeln!(out, "record_every = {k}");
        }
        let _ = writeln!(out, "burn_in_fraction = {:?}", self.burn_in_fraction);
        let _ = writeln!(out, "master_seed = {}", self.master_seed);
        let _ = writeln!(out, "n_seeds = {}", self.n_seeds);
        let _ = writeln!(out, "output_dir = \"{}\"", self.output_dir.display());
        if let Some(x0) = &self.x0 {
            let _ = writeln!(
                out,
                "x0 = {}",
                join(&mut x0.iter().map(|v| format!("{v:?}")))
            );
        }
        let _ = writeln!(out, "init_scale = {:?}", self.init_scale);
        out
    }
}

fn strip_quotes(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2
        && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\'')))
    {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::config(key, format!("malformed number `{}`", v.trim())))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    let t = v.trim();
    t.parse::<usize>().or_else(|_| {
        // Accept integral scientific notation such as `5e5`.
        let f: f64 = t
            .parse()
            .map_err(|_| Error::config(key, format!("malformed integer `{t}`")))?;
        if f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64 {
            Ok(f as usize)
        } else {
            Err(Error::config(key, format!("malformed integer `{t}`")))
        }
    })
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s)).collect()
}

fn square_dim(key: &str, len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len {
        return Err(Error::config(
            key,
            format!("expected a square matrix, got {len} entries"),
        ));
    }
    Ok(n)
}

fn linear_params(raw: &BTreeMap<String, String>) -> Result<LinearParams> {
    let get = |k: &str| raw.get(k).map(|v| parse_list(k, v, parse_f64)).transpose();
    let a_vals = get("A")?.ok_or_else(|| Error::config("A", "required for the linear model"))?;
    let nx = square_dim("A", a_vals.len())?;
    let a = DMatrix::from_row_slice(nx, nx, &a_vals);
    let b = match get("b")? {
        Some(v) if v.len() == nx => DVector::from_vec(v),
        Some(v) => {
            return Err(Error::config(
                "b",
                format!("expected {nx} entries, got {}", v.len()),
            ))
        }
        None => DVector::zeros(nx),
    };
    let h = match get("H")? {
        Some(v) if !v.is_empty() && v.len() % nx == 0 => {
            DMatrix::from_row_slice(v.len() / nx, nx, &v)
        }
        Some(v) => {
            return Err(Error::config(
                "H",
                format!("entry count {} is not a multiple of nx = {nx}", v.len()),
            ))
        }
        None => DMatrix::identity(nx, nx),
    };
    let ny = h.nrows();
    let c = match get("C")? {
        Some(v) if !v.is_empty() && v.len() % nx == 0 => {
            DMatrix::from_row_slice(nx, v.len() / nx, &v)
        }
        Some(v) => {
            return Err(Error::config(
                "C",
                format!("entry count {} is not a multiple of nx = {nx}", v.len()),
            ))
        }
        None => DMatrix::identity(nx, nx),
    };
    let r = match get("R")? {
        Some(v) if v.len() == ny * ny => DMatrix::from_row_slice(ny, ny, &v),
        Some(v) => {
            return Err(Error::config(
                "R",
                format!("expected {} entries, got {}", ny * ny, v.len()),
            ))
        }
        None => DMatrix::identity(ny, ny),
    };
    LinearModelSpec::new(a.clone(), b.clone(), h.clone(), c.clone(), r.clone())
        .map_err(|e| Error::config("model", e.to_string()))?;
    Ok(LinearParams { a, b, h, c, r })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut raw: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                line,
                format!("line {} is not of the form key = value", lineno + 1),
            )
        })?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if raw
            .insert(key.to_string(), strip_quotes(value).to_string())
            .is_some()
        {
            return Err(Error::config(key, "duplicate key"));
        }
    }

    let model_name = raw
        .get("model")
        .ok_or_else(|| Error::config("model", "missing required key"))?;
    let model = match model_name.as_str() {
        "lorenz63" => {
            if let Some(k) = LINEAR_KEYS.iter().find(|k| raw.contains_key(**k)) {
                return Err(Error::config(*k, "only valid with model = \"linear\""));
            }
            ModelChoice::Lorenz63
        }
        "linear" => ModelChoice::Linear(linear_params(&raw)?),
        other => return Err(Error::config("model", format!("unknown model `{other}`"))),
    };

    let mut cfg = ExperimentConfig::with_model(model);
    for (key, value) in &raw {
        match key.as_str() {
            "epsilon_list" => cfg.epsilon_list = parse_list(key, value, parse_f64)?,
            "m" => cfg.m = parse_usize(key, value)?,
            "m_list" => cfg.m_list = Some(parse_list(key, value, parse_usize)?),
            "dt" => cfg.dt = parse_f64(key, value)?,
            "n_steps" => cfg.n_steps = parse_usize(key, value)?,
            "record_every" => cfg.record_every = Some(parse_usize(key, value)?),
            "burn_in_fraction" => cfg.burn_in_fraction = parse_f64(key, value)?,
            "master_seed" => {
                cfg.master_seed = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("malformed integer `{value}`")))?
            }
            "n_seeds" => cfg.n_seeds = parse_usize(key, value)?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            "x0" => cfg.x0 = Some(parse_list(key, value, parse_f64)?),
            "init_scale" => cfg.init_scale = parse_f64(key, value)?,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
