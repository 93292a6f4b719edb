//! Projected fixed-point solver built on the stationarity condition.
//!
//! At an interior optimum each coordinate satisfies
//! `ℓ_k - L_k(ℓ) e^{-b_k ℓ_k} = K_k(ℓ)`, where `L_k` and `K_k` depend on the
//! allocation only through `E[S]` and `E[S²]`. For fixed moments that
//! scalar equation has the closed-form root
//! `ℓ_k = W0(b_k L_k e^{-b_k K_k}) / b_k + K_k`; iterating it with the
//! moments refreshed, and clamping to `[0, l_max]`, gives the solver.
//! Box multipliers never need to be materialized: the clamp replaces them.

use serde::Serialize;

use crate::error::Result;
use crate::lambert::lambert_w0_exp;
use crate::objective::{is_stable, objective_unchecked, stable_moments, stable_moments_unchecked, Moments};
use crate::solve::{
    backtrack_into_stability, check_init, inf_norm, inf_norm_diff, Method, SolveReport, TraceEntry,
};
use crate::workload::{Allocation, Workload};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointCoefficients {
    pub lk: Vec<f64>,
    pub kk: Vec<f64>,
}

/// Contraction envelope of the unprojected fixed-point map over `[0, box_cap]^N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionCertificate {
    pub box_cap: f64,
    pub rho_max: f64,
    pub t_max: f64,
    pub es_max: f64,
    pub es2_max: f64,
    /// Bound on the ∞-norm of the map's Jacobian. `None` when `rho_max >= 1`.
    pub l_infty: Option<f64>,
    pub contractive: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-8,
            max_iter: 10_000,
            record_trace: false,
        }
    }
}

pub fn coefficients(w: &Workload, alloc: &[f64]) -> Result<FixedPointCoefficients> {
    let m = stable_moments(w, alloc)?;
    Ok(coefficients_from(w, m))
}

fn coefficients_from(w: &Workload, m: Moments) -> FixedPointCoefficients {
    let lambda = w.lambda();
    let (lk, kk) = w
        .tasks()
        .iter()
        .map(|t| {
            let l = w.alpha() * t.a * t.b / (lambda * t.c * t.c) * m.slack;
            let k = -t.t0 / t.c - m.slack / (lambda * t.c) - lambda * m.es2 / (2.0 * t.c * m.slack);
            (l, k)
        })
        .unzip();
    FixedPointCoefficients { lk, kk }
}

/// Root of `x - L e^{-b x} = K` for `L >= 0`, `b > 0`.
fn lambert_root(l: f64, k: f64, b: f64) -> Result<f64> {
    if l == 0.0 {
        return Ok(k);
    }
    let log_z = (b * l).ln() - b * k;
    Ok(lambert_w0_exp(log_z)? / b + k)
}

/// One projected fixed-point step `ℓ ↦ clamp(ℓ̂(ℓ), 0, l_max)`.
pub fn fp_update(w: &Workload, alloc: &[f64]) -> Result<Allocation> {
    let m = stable_moments(w, alloc)?;
    update_from(w, m)
}

/// The unprojected map `ℓ̂(ℓ)`.
pub fn fp_update_unprojected(w: &Workload, alloc: &[f64]) -> Result<Vec<f64>> {
    let m = stable_moments(w, alloc)?;
    unprojected_from(w, m)
}

fn unprojected_from(w: &Workload, m: Moments) -> Result<Vec<f64>> {
    let coef = coefficients_from(w, m);
    w.tasks()
        .iter()
        .zip(coef.lk.iter().zip(&coef.kk))
        .map(|(t, (&l, &k))| lambert_root(l, k, t.b))
        .collect()
}

fn update_from(w: &Workload, m: Moments) -> Result<Allocation> {
    let l_max = w.l_max();
    Ok(Allocation(
        unprojected_from(w, m)?
            .into_iter()
            .map(|x| x.clamp(0.0, l_max))
            .collect(),
    ))
}

pub fn contraction_bound(w: &Workload, box_cap: f64) -> ContractionCertificate {
    let env = w.envelope(box_cap);
    let valid = env.rho_max < 1.0;
    let l_infty = valid.then(|| {
        let lambda = w.lambda();
        let gap = 1.0 - env.rho_max;
        let bracket = 1.0 + lambda * (env.t_max / gap + lambda * env.es2_max / (2.0 * gap * gap));
        let worst = w
            .tasks()
            .iter()
            .map(|t| bracket / t.c + lambda / (t.b * gap))
            .fold(f64::MIN, f64::max);
        worst * w.mean_token_cost()
    });
    ContractionCertificate {
        box_cap,
        rho_max: env.rho_max,
        t_max: env.t_max,
        es_max: env.es_max,
        es2_max: env.es2_max,
        l_infty,
        contractive: l_infty.is_some_and(|l| l < 1.0),
        valid,
    }
}

pub fn solve_fixed_point(w: &Workload, init: &[f64], opts: FixedPointOptions) -> Result<SolveReport> {
    check_init(w, init)?;
    let mut cur = init.to_vec();
    let mut trace = opts.record_trace.then(Vec::new);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut backtrack_events = 0;
    let mut widest = inf_norm(&cur);

    while iterations < opts.max_iter {
        let m = stable_moments_unchecked(w, &cur)?;
        let mut next = update_from(w, m)?.into_inner();
        let halvings = if is_stable(w, &next) {
            0
        } else {
            backtrack_into_stability(w, &cur, &mut next)
        };
        if halvings > 0 {
            backtrack_events += 1;
        }
        iterations += 1;
        let step = inf_norm_diff(&next, &cur);
        residual = step / (1.0 + inf_norm(&cur));
        widest = widest.max(inf_norm(&next));
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceEntry {
                iteration: iterations,
                alloc: next.clone(),
                step,
                objective: objective_unchecked(w, &next)?,
                halvings,
            });
        }
        cur = next;
        if residual < opts.tol {
            converged = true;
            break;
        }
    }

    let cert = contraction_bound(w, widest);
    let certified = converged && cert.contractive;
    let mut notes = Vec::new();
    if converged && !cert.contractive {
        notes.push(format!(
            "converged without a contraction certificate on [0, {widest:.3}]^N"
        ));
    }
    if backtrack_events > 0 {
        notes.push(format!(
            "stability safeguard engaged on {backtrack_events} iteration(s)"
        ));
    }
    Ok(SolveReport {
        method: Method::FixedPoint,
        alloc: Allocation(cur),
        converged,
        iterations,
        residual,
        tol: opts.tol,
        backtrack_events,
        certified,
        contraction: Some(cert),
        lipschitz: None,
        eta: None,
        box_limited: false,
        notes,
        trace,
    })
}
