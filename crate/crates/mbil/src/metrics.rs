//! CSV outputs.
//!
//! `metrics.csv` columns: `run_id, seed, iteration, dyn_loss, pol_loss,
//! total, eval_return_mean, eval_return_std`. `iteration` counts completed
//! updates (1-based); the losses are those of the batch that produced that
//! update. Evaluation columns are empty on rows without an evaluation.
//! `dyn_loss` is `NaN` when the dataset has no `(s, a, s', a')` tuples.

use std::collections::BTreeMap;
use std::path::Path;

use mbil_core::mbil::TrainReport;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub dyn_loss: f64,
    pub pol_loss: f64,
    pub total: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
}

/// Rows every `log_every` iterations plus every evaluated and the last iteration.
pub fn metrics_rows(run_id: &str, seed: u64, report: &TrainReport, log_every: usize) -> Vec<MetricsRow> {
    let evals: BTreeMap<usize, (f64, f64)> = report.evals.iter().map(|e| (e.iteration, (e.mean, e.std))).collect();
    let last = report.records.len();
    report
        .records
        .iter()
        .filter_map(|r| {
            let it = r.iteration + 1;
            let eval = evals.get(&it);
            (it % log_every == 0 || it == last || eval.is_some()).then(|| MetricsRow {
                run_id: run_id.to_string(),
                seed,
                iteration: it,
                dyn_loss: r.dynamics_loss,
                pol_loss: r.policy_loss,
                total: r.total_loss,
                eval_return_mean: eval.map(|e| e.0),
                eval_return_std: eval.map(|e| e.1),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io(path))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// One finished run, as listed in `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub method: String,
    pub alpha: f64,
    pub beta: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized: f64,
}

/// `summary.csv`: mean ± std (and median) of final returns across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub alpha: f64,
    pub beta: f64,
    pub n_trajectories: usize,
    pub runs: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub return_median: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
}

pub fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, u64, u64, usize, Vec<&RunRow>)> = Vec::new();
    for r in runs {
        let key = (r.method.clone(), r.alpha.to_bits(), r.beta.to_bits(), r.n_trajectories);
        match groups.iter_mut().find(|g| (g.0.clone(), g.1, g.2, g.3) == key) {
            Some(g) => g.4.push(r),
            None => groups.push((key.0, key.1, key.2, key.3, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(method, a, b, n, rs)| {
            let ret: Vec<f64> = rs.iter().map(|r| r.return_mean).collect();
            let norm: Vec<f64> = rs.iter().map(|r| r.normalized).collect();
            let (m, s) = mbil_core::math::mean_std(&ret);
            let (nm, ns) = mbil_core::math::mean_std(&norm);
            SummaryRow {
                method,
                alpha: f64::from_bits(a),
                beta: f64::from_bits(b),
                n_trajectories: n,
                runs: rs.len(),
                return_mean: m,
                return_std: s,
                return_median: mbil_core::math::median(&ret),
                normalized_mean: nm,
                normalized_std: ns,
            }
        })
        .collect()
}
