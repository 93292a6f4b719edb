//! One-coordinate sensitivity sweeps of the utility.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integer::rounding_lower_bound;
use crate::objective::objective_value;
use crate::sim::{simulate, SimConfig};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub l: f64,
    /// `None` when the point is unstable.
    pub j_analytic: Option<f64>,
    pub j_lower: Option<f64>,
    pub j_simulated: Option<f64>,
    pub j_simulated_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub task: String,
    pub rows: usize,
    pub maximizer_l: Option<f64>,
    pub maximizer_j: Option<f64>,
    pub unimodal: bool,
}

/// Sweep grid `start, start + step, ...` up to and including `end`.
pub fn sweep_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start >= 0.0 && start <= end) {
        return Err(Error::Precondition(format!(
            "sweep range must satisfy 0 <= start <= end, got [{start}, {end}]"
        )));
    }
    if start == end {
        return Ok(vec![start]);
    }
    if !(step > 0.0) {
        return Err(Error::Precondition(format!(
            "sweep step must be positive, got {step}"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

/// Number of sign changes between successive differences, ignoring
/// differences no larger than `noise`.
pub fn sign_changes(values: &[f64], noise: f64) -> usize {
    let signs: Vec<bool> = values
        .windows(2)
        .map(|p| p[1] - p[0])
        .filter(|d| d.abs() > noise)
        .map(|d| d > 0.0)
        .collect();
    signs.windows(2).filter(|s| s[0] != s[1]).count()
}

/// Rises then falls (or is monotone) beyond `noise`.
pub fn is_unimodal(values: &[f64], noise: f64) -> bool {
    let diffs: Vec<f64> = values
        .windows(2)
        .map(|p| p[1] - p[0])
        .filter(|d| d.abs() > noise)
        .collect();
    match sign_changes(values, noise) {
        0 => true,
        1 => diffs.first().is_some_and(|d| *d > 0.0),
        _ => false,
    }
}

/// Varies coordinate `task` of `base` over the grid, others held fixed.
/// With `sim`, row `i` is also simulated on stream `i` of `sim.seed`.
pub fn sweep(
    w: &Workload,
    base: &[f64],
    task: usize,
    grid: &[f64],
    sim: Option<&SimConfig>,
) -> Result<(Vec<SweepRow>, SweepSummary)> {
    w.check_allocation(base)?;
    if task >= w.len() {
        return Err(Error::Precondition(format!("task index {task} out of range")));
    }
    if let Some(&bad) = grid.iter().find(|&&l| l > w.l_max()) {
        return Err(Error::Precondition(format!(
            "sweep value {bad} exceeds l_max = {}",
            w.l_max()
        )));
    }
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut x = base.to_vec();
            x[task] = l;
            let j_analytic = objective_value(w, &x).ok();
            let j_lower = rounding_lower_bound(w, &x).ok();
            let (j_simulated, j_simulated_stderr) = match sim {
                Some(cfg) => {
                    let s = simulate(
                        w,
                        &x,
                        &SimConfig {
                            stream: i as u64,
                            ..*cfg
                        },
                    )?;
                    (Some(s.empirical_j), Some(s.stderr_j))
                }
                None => (None, None),
            };
            Ok(SweepRow {
                l,
                j_analytic,
                j_lower,
                j_simulated,
                j_simulated_stderr,
            })
        })
        .collect::<Result<_>>()?;

    let best = rows.iter().filter_map(|r| r.j_analytic.map(|j| (r.l, j))).fold(
        None,
        |acc: Option<(f64, f64)>, (l, j)| match acc {
            Some((_, bj)) if bj >= j => acc,
            _ => Some((l, j)),
        },
    );
    let analytic: Vec<f64> = rows.iter().filter_map(|r| r.j_analytic).collect();
    let summary = SweepSummary {
        task: w.tasks()[task].name.clone(),
        rows: rows.len(),
        maximizer_l: best.map(|b| b.0),
        maximizer_j: best.map(|b| b.1),
        unimodal: is_unimodal(&analytic, 1e-10),
    };
    Ok((rows, summary))
}
