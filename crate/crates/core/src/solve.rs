//! Pieces shared by both continuous solvers: the report type, the trace
//! and the stability backtracking safeguard.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixed_point::ContractionCertificate;
use crate::objective::is_stable;
use crate::pga::LipschitzCertificate;
use crate::workload::{Allocation, Workload};

/// Max halvings toward the previous iterate when a step leaves the
/// stability region.
pub const MAX_HALVINGS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FixedPoint,
    Pga,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::FixedPoint => "fixed-point",
            Method::Pga => "pga",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub alloc: Vec<f64>,
    /// `‖ℓ^(n+1) - ℓ^(n)‖_∞` in tokens.
    pub step: f64,
    pub objective: f64,
    /// Halvings applied to reach a stable point; zero on ordinary steps.
    pub halvings: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub method: Method,
    pub alloc: Allocation,
    pub converged: bool,
    pub iterations: usize,
    /// Stopping statistic at exit, on the same scale as the tolerance.
    pub residual: f64,
    pub tol: f64,
    /// Number of iterations that needed the stability safeguard.
    pub backtrack_events: usize,
    /// Converged and the relevant certificate guarantees convergence.
    pub certified: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Some coordinate stopped at a certificate box cap below `l_max` while
    /// its gradient still pointed outward.
    pub box_limited: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

pub(crate) fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Pulls `cand` toward `prev` by repeated halving until `λ E[S] < 1`.
/// `prev` must be stable. Returns the number of halvings.
pub(crate) fn backtrack_into_stability(w: &Workload, prev: &[f64], cand: &mut [f64]) -> u32 {
    let mut halvings = 0;
    while !is_stable(w, cand) {
        if halvings == MAX_HALVINGS {
            cand.copy_from_slice(prev);
            break;
        }
        for (c, p) in cand.iter_mut().zip(prev) {
            *c = p + 0.5 * (*c - p);
        }
        halvings += 1;
    }
    halvings
}

pub(crate) fn check_init(w: &Workload, init: &[f64]) -> Result<()> {
    w.check_allocation(init)
        .map_err(|e| Error::Precondition(format!("initial allocation infeasible: {e}")))?;
    if !is_stable(w, init) {
        return Err(Error::Precondition(
            "initial allocation is outside the stability region".into(),
        ));
    }
    Ok(())
}
