//! Integer token budgets from a continuous optimum, and the utility
//! bracket `J̄(ℓ*) <= J(ℓ_int) <= J(ℓ*)`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::{objective_unchecked, queue_metrics, stable_moments};
use crate::workload::Workload;

/// Largest N accepted by [`exhaustive_floor_ceil`].
pub const MAX_EXHAUSTIVE_TASKS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Round,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegerResult {
    pub alloc_int: Vec<u64>,
    pub j_int: f64,
    pub j_cont: f64,
    /// `None` when the bound's validity condition fails.
    pub j_lower: Option<f64>,
    pub strategy: Strategy,
}

fn int_cap(l_max: f64) -> u64 {
    l_max.floor() as u64
}

/// Component-wise nearest integer, halves away from zero, clamped to
/// `[0, floor(l_max)]`.
pub fn round_nearest(alloc: &[f64], l_max: f64) -> Vec<u64> {
    let cap = int_cap(l_max);
    alloc
        .iter()
        .map(|x| (x.max(0.0).round() as u64).min(cap))
        .collect()
}

pub fn as_real(alloc_int: &[u64]) -> Vec<f64> {
    alloc_int.iter().map(|&x| x as f64).collect()
}

/// Rounds and evaluates, with the bracket filled in.
pub fn round_result(w: &Workload, alloc: &[f64]) -> Result<IntegerResult> {
    let j_cont = queue_metrics(w, alloc)?.j;
    let alloc_int = round_nearest(alloc, w.l_max());
    let j_int = objective_unchecked(w, &as_real(&alloc_int))?;
    Ok(IntegerResult {
        alloc_int,
        j_int,
        j_cont,
        j_lower: rounding_lower_bound(w, alloc).ok(),
        strategy: Strategy::Round,
    })
}

/// Evaluates every floor/ceil combination around `alloc` and keeps the
/// best stable one. Ties go to the lexicographically smallest vector.
pub fn exhaustive_floor_ceil(w: &Workload, alloc: &[f64]) -> Result<IntegerResult> {
    let n = w.len();
    if n > MAX_EXHAUSTIVE_TASKS {
        return Err(Error::Capability(format!(
            "exhaustive floor/ceil search needs 2^{n} evaluations; \
             N > {MAX_EXHAUSTIVE_TASKS} is not supported, use round_nearest instead"
        )));
    }
    let j_cont = queue_metrics(w, alloc)?.j;
    let cap = int_cap(w.l_max());
    let floors: Vec<u64> = alloc.iter().map(|x| (x.floor() as u64).min(cap)).collect();
    let ceils: Vec<u64> = alloc.iter().map(|x| (x.ceil() as u64).min(cap)).collect();

    let best = (0u64..1 << n)
        .into_par_iter()
        .filter_map(|mask| {
            let cand: Vec<u64> = (0..n)
                .map(|k| if mask >> k & 1 == 1 { ceils[k] } else { floors[k] })
                .collect();
            objective_unchecked(w, &as_real(&cand)).ok().map(|j| (j, cand))
        })
        .reduce_with(|a, b| match a.0.partial_cmp(&b.0) {
            Some(Ordering::Greater) => a,
            Some(Ordering::Less) => b,
            _ => {
                if a.1 <= b.1 {
                    a
                } else {
                    b
                }
            }
        });
    let (j_int, alloc_int) =
        best.ok_or_else(|| Error::Capability("every floor/ceil combination is unstable".into()))?;
    Ok(IntegerResult {
        alloc_int,
        j_int,
        j_cont,
        j_lower: rounding_lower_bound(w, alloc).ok(),
        strategy: Strategy::Exhaustive,
    })
}

/// Utility lower bound for any integer vector within one token of `alloc`
/// in every coordinate. Requires `λ (E[S] + c_max) < 1`.
pub fn rounding_lower_bound(w: &Workload, alloc: &[f64]) -> Result<f64> {
    let m = stable_moments(w, alloc).map_err(|e| Error::BoundUnavailable(e.to_string()))?;
    let lambda = w.lambda();
    let c_max = w.tasks().iter().map(|t| t.c).fold(0.0, f64::max);
    let shifted_load = lambda * (m.es + c_max);
    if !(shifted_load < 1.0) {
        return Err(Error::BoundUnavailable(format!(
            "validity condition lambda * (E[S] + c_max) < 1 fails ({shifted_load})"
        )));
    }
    let acc: f64 = w
        .tasks()
        .iter()
        .zip(alloc)
        .map(|(t, &l)| t.pi * t.accuracy_unchecked((l - 1.0).max(0.0)))
        .sum();
    Ok(w.alpha() * acc - (lambda * m.es2 + 2.0 * c_max) / (2.0 * (1.0 - shifted_load)) - m.es)
}
