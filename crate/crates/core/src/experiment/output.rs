//! Writes sweep and chaos results to disk.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::diagnostics::{format_full, write_diagnostics_csv};
use crate::experiment::sweep::SweepResult;
use crate::meanfield::{ChaosRow, CHAOS_CSV_HEADER};
use crate::{Error, Result};

pub const SWEEP_CSV_HEADER: &str =
    "epsilon,m,seed,time_avg_mse,time_avg_lmax,time_avg_lmin,diverged";

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body).map_err(|e| Error::io(path, e))
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            format_full(r.epsilon),
            r.m,
            r.seed_index,
            format_full(r.time_avg_mse),
            format_full(r.time_avg_lmax),
            format_full(r.time_avg_lmin),
            r.diverged
        ));
    }
    out
}

fn summary_json(result: &SweepResult) -> serde_json::Value {
    let failures: Vec<_> = result
        .rows
        .iter()
        .filter(|r| r.diverged)
        .map(|r| {
            json!({
                "epsilon": r.epsilon,
                "m": r.m,
                "seed": r.seed_index,
                "reason": r.failure,
            })
        })
        .collect();
    let seeds: Vec<_> = result
        .seeds()
        .into_iter()
        .map(|(index, seed)| json!({ "index": index, "seed": seed }))
        .collect();
    let violations: usize = result.rows.iter().map(|r| r.invariant_violations).sum();
    json!({
        "fits": result.fits,
        "cells": result.rows.len(),
        "diverged_cells": result.excluded_cells,
        "excluded_from_fits": result.excluded_cells,
        "failures": failures,
        "invariant_violations": violations,
        "seeds": seeds,
        "config": result.config.echo(),
    })
}

/// Writes `sweep.csv`, `summary.json`, `config.echo` and, when per-cell
/// diagnostics were kept, `cells/eps<ε>_m<M>_seed<s>.csv`. Returns the
/// written paths.
pub fn write_results(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::new();

    let csv = dir.join("sweep.csv");
    write_file(&csv, sweep_csv(result).as_bytes())?;
    manifest.push(csv);

    let summary = dir.join("summary.json");
    let mut body = serde_json::to_string_pretty(&summary_json(result))
        .map_err(|e| Error::Experiment(format!("cannot serialize summary: {e}")))?;
    body.push('\n');
    write_file(&summary, body.as_bytes())?;
    manifest.push(summary);

    let echo = dir.join("config.echo");
    write_file(&echo, result.config.echo().as_bytes())?;
    manifest.push(echo);

    let with_diags: Vec<_> = result
        .rows
        .iter()
        .filter_map(|r| r.diagnostics.as_ref().map(|d| (r, d)))
        .collect();
    if !with_diags.is_empty() {
        let cells = dir.join("cells");
        std::fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
        for (row, diags) in with_diags {
            let path = cells.join(format!(
                "eps{:e}_m{}_seed{}.csv",
                row.epsilon, row.m, row.seed_index
            ));
            let mut buf = Vec::new();
            write_diagnostics_csv(&mut buf, diags).map_err(|e| Error::io(&path, e))?;
            write_file(&path, &buf)?;
            manifest.push(path);
        }
    }
    Ok(manifest)
}

pub fn write_chaos_csv(rows: &[ChaosRow], path: &Path) -> Result<()> {
    let mut out = String::from(CHAOS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}
