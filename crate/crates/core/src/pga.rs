//! Projected gradient ascent with a fixed step from a global bound on the
//! Hessian of `J` over a uniform box.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::{
    gradient_from, is_stable, objective_unchecked, stable_moments_unchecked, HessianMatrix,
};
use crate::solve::{backtrack_into_stability, check_init, inf_norm_diff, Method, SolveReport, TraceEntry};
use crate::workload::{Allocation, Workload};

/// Default load margin used to size the certificate box.
pub const DEFAULT_BOX_MARGIN: f64 = 0.05;

/// Entrywise bound `H_kj` on `|∂²J/∂ℓ_k∂ℓ_j|` over `[0, box_cap]^N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzCertificate {
    pub box_cap: f64,
    pub rho_max: f64,
    /// Present only when `valid`.
    pub h_bound: Option<HessianMatrix>,
    /// `max_k Σ_j H_kj`.
    pub l_j: Option<f64>,
    /// `2 / L_J`.
    pub eta_max: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgaOptions {
    /// Fixed step; `None` selects `1 / L_J`.
    pub eta: Option<f64>,
    /// Uniform box for projection and certificate; `None` uses
    /// [`Workload::stable_box_cap`] with [`DEFAULT_BOX_MARGIN`].
    pub box_cap: Option<f64>,
    /// Tolerance on the projected-gradient norm `‖Δℓ‖_∞ / η`.
    pub tol: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for PgaOptions {
    fn default() -> Self {
        PgaOptions {
            eta: None,
            box_cap: None,
            tol: 1e-8,
            max_iter: 200_000,
            record_trace: false,
        }
    }
}

pub fn lipschitz_bound(w: &Workload, box_cap: f64) -> LipschitzCertificate {
    let env = w.envelope(box_cap);
    let valid = env.rho_max < 1.0;
    if !valid {
        return LipschitzCertificate {
            box_cap,
            rho_max: env.rho_max,
            h_bound: None,
            l_j: None,
            eta_max: None,
            valid,
        };
    }
    let lambda = w.lambda();
    let gap = 1.0 - env.rho_max;
    let tasks = w.tasks();
    let n = tasks.len();
    let mut h = HessianMatrix::zeros(n);
    for (k, tk) in tasks.iter().enumerate() {
        for (j, tj) in tasks.iter().enumerate() {
            let cross = tk.pi * tk.c * tj.pi * tj.c;
            let mut v = lambda * lambda * cross * (env.t_max_per_task[k] + env.t_max_per_task[j])
                / (gap * gap)
                + lambda.powi(3) * cross * env.es2_max / gap.powi(3);
            if k == j {
                v += lambda * tk.pi * tk.c * tk.c / gap + w.alpha() * tk.pi * tk.a * tk.b * tk.b;
            }
            h.set(k, j, v);
        }
    }
    let l_j = (0..n).map(|k| h.row(k).iter().sum::<f64>()).fold(0.0, f64::max);
    LipschitzCertificate {
        box_cap,
        rho_max: env.rho_max,
        h_bound: Some(h),
        l_j: Some(l_j),
        eta_max: Some(2.0 / l_j),
        valid,
    }
}

pub fn solve_pga(w: &Workload, init: &[f64], opts: PgaOptions) -> Result<SolveReport> {
    check_init(w, init)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Precondition(format!(
            "tol must be positive, got {}",
            opts.tol
        )));
    }
    let box_cap = opts
        .box_cap
        .unwrap_or_else(|| w.stable_box_cap(DEFAULT_BOX_MARGIN))
        .min(w.l_max());
    if !(box_cap >= 0.0) {
        return Err(Error::Precondition(format!(
            "box cap must be nonnegative, got {box_cap}"
        )));
    }
    let cert = lipschitz_bound(w, box_cap);
    let eta = match (opts.eta, cert.eta_max) {
        (Some(eta), Some(cap)) if !(eta > 0.0 && eta < cap) => {
            return Err(Error::Precondition(format!(
                "step size {eta} outside (0, {cap}) required by the Lipschitz bound"
            )))
        }
        (Some(eta), _) if !(eta > 0.0) => {
            return Err(Error::Precondition(format!(
                "step size must be positive, got {eta}"
            )))
        }
        (Some(eta), _) => eta,
        (None, Some(cap)) => 0.5 * cap,
        (None, None) => {
            return Err(Error::Precondition(format!(
                "no Lipschitz certificate on [0, {box_cap}]^N (rho_max = {:.4} >= 1); \
                 pass an explicit step or a smaller box cap",
                cert.rho_max
            )))
        }
    };

    let mut notes = Vec::new();
    if opts.eta.is_some() && !cert.valid {
        notes.push("explicit step used without a valid Lipschitz certificate".to_string());
    }
    if let (Some(e), Some(cap)) = (opts.eta, cert.eta_max) {
        if e > 0.5 * cap {
            notes.push("step above 1/L_J: monotone ascent is not guaranteed".to_string());
        }
    }

    let mut cur: Vec<f64> = init.iter().map(|x| x.clamp(0.0, box_cap)).collect();
    let mut trace = opts.record_trace.then(Vec::new);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut backtrack_events = 0;
    let mut grad = gradient_from(w, &cur, stable_moments_unchecked(w, &cur)?);

    while iterations < opts.max_iter {
        let mut next: Vec<f64> = cur
            .iter()
            .zip(&grad)
            .map(|(x, g)| (x + eta * g).clamp(0.0, box_cap))
            .collect();
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
        residual = step / eta;
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
        grad = gradient_from(w, &cur, stable_moments_unchecked(w, &cur)?);
        if residual < opts.tol {
            converged = true;
            break;
        }
    }

    let box_limited =
        box_cap < w.l_max() && cur.iter().zip(&grad).any(|(&x, &g)| x >= box_cap && g > opts.tol);
    if box_limited {
        notes.push(format!(
            "solution touches the certificate box cap {box_cap:.3} with an outward gradient; \
             the optimum over [0, l_max]^N may lie outside the box"
        ));
    }
    if backtrack_events > 0 {
        notes.push(format!(
            "stability safeguard engaged on {backtrack_events} iteration(s)"
        ));
    }
    let certified =
        converged && cert.valid && cert.eta_max.is_some_and(|cap| eta < cap) && backtrack_events == 0;

    Ok(SolveReport {
        method: Method::Pga,
        alloc: Allocation(cur),
        converged,
        iterations,
        residual,
        tol: opts.tol,
        backtrack_events,
        certified,
        contraction: None,
        lipschitz: Some(cert),
        eta: Some(eta),
        box_limited,
        notes,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{gradient, hessian};
    use crate::presets::reference_workload;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const ORACLE: [f64; 6] = [0.0, 340.889_819_47, 0.0, 0.0, 346.241_368_97, 30.136_259_93];

    #[test]
    fn reference_solution() {
        let w = reference_workload();
        let r = solve_pga(&w, &[0.0; 6], PgaOptions::default()).unwrap();
        assert!(r.converged, "{} iterations", r.iterations);
        assert!(r.certified);
        assert!(!r.box_limited);
        // The stopping rule is on the gradient scale; BBH has curvature of
        // only ~6e-6 per token², so 1e-8 pins it to ~2e-3 tokens.
        for (x, o) in r.alloc.iter().zip(ORACLE) {
            assert_abs_diff_eq!(*x, o, epsilon = 2e-3);
        }
        let tight = solve_pga(
            &w,
            &[0.0; 6],
            PgaOptions {
                tol: 1e-11,
                ..Default::default()
            },
        )
        .unwrap();
        for (x, o) in tight.alloc.iter().zip(ORACLE) {
            assert_abs_diff_eq!(*x, o, epsilon = 1e-5);
        }
    }

    #[test]
    fn ascent_is_monotone_with_the_default_step() {
        let w = reference_workload();
        let opts = PgaOptions {
            record_trace: true,
            max_iter: 5_000,
            ..Default::default()
        };
        let r = solve_pga(&w, &[0.0; 6], opts).unwrap();
        let tr = r.trace.unwrap();
        let mut prev = objective_value_at(&w, &[0.0; 6]);
        for e in &tr {
            assert!(e.objective >= prev - 1e-12);
            prev = e.objective;
        }
    }

    fn objective_value_at(w: &Workload, x: &[f64]) -> f64 {
        crate::objective::objective_value(w, x).unwrap()
    }

    #[test]
    fn stationary_interior_start_is_a_fixed_point() {
        let w = reference_workload();
        let tight = solve_pga(
            &w,
            &[0.0; 6],
            PgaOptions {
                tol: 1e-12,
                max_iter: 1_000_000,
                ..Default::default()
            },
        )
        .unwrap();
        // Keep only the interior coordinates free by shrinking to N = 3.
        let interior: Vec<_> = [1, 4, 5].iter().map(|&k| w.tasks()[k].clone()).collect();
        let mut tasks = interior;
        let total: f64 = tasks.iter().map(|t| t.pi).sum();
        for t in &mut tasks {
            t.pi /= total;
        }
        let sub = Workload::new(w.lambda() * 0.5, w.alpha(), w.l_max(), tasks).unwrap();
        let opt = solve_pga(
            &sub,
            &[0.0; 3],
            PgaOptions {
                tol: 1e-13,
                max_iter: 1_000_000,
                ..Default::default()
            },
        )
        .unwrap();
        let g = gradient(&sub, &opt.alloc).unwrap().0;
        assert!(g.iter().all(|x| x.abs() < 1e-12));
        let one = solve_pga(
            &sub,
            &opt.alloc,
            PgaOptions {
                max_iter: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(inf_norm_diff(&one.alloc, &opt.alloc) < 1e-9);
        assert!(tight.converged);
    }

    #[test]
    fn bounds_dominate_sampled_hessians() {
        let w = reference_workload();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for &cap in &[100.0, 400.0, 700.0] {
            let cert = lipschitz_bound(&w, cap);
            assert!(cert.valid);
            let hb = cert.h_bound.as_ref().unwrap();
            assert_abs_diff_eq!(cert.eta_max.unwrap() * cert.l_j.unwrap(), 2.0, epsilon = 1e-12);
            for _ in 0..200 {
                let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..=cap)).collect();
                let h = hessian(&w, &x).unwrap();
                for k in 0..6 {
                    for j in 0..6 {
                        assert!(hb.get(k, j) >= 0.0);
                        assert!(h.get(k, j).abs() <= hb.get(k, j) + 1e-9);
                    }
                }
                assert!(h.inf_norm() <= cert.l_j.unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn bound_reduces_to_accuracy_curvature_without_arrivals() {
        let w = reference_workload().with_lambda(1e-12).unwrap();
        let cert = lipschitz_bound(&w, 400.0);
        let hb = cert.h_bound.unwrap();
        for (k, t) in w.tasks().iter().enumerate() {
            for j in 0..6 {
                let expect = if k == j {
                    w.alpha() * t.pi * t.a * t.b * t.b
                } else {
                    0.0
                };
                assert_abs_diff_eq!(hb.get(k, j), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reference_box_400_bound() {
        let cert = lipschitz_bound(&reference_workload(), 400.0);
        let l = cert.l_j.unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_eq!(cert.eta_max.unwrap(), 2.0 / l);
        assert!(!lipschitz_bound(&reference_workload(), 32768.0).valid);
    }

    #[test]
    fn step_outside_the_certified_range_is_rejected() {
        let w = reference_workload();
        let cap = lipschitz_bound(&w, w.stable_box_cap(DEFAULT_BOX_MARGIN))
            .eta_max
            .unwrap();
        for eta in [0.0, -1.0, cap, 2.0 * cap] {
            let opts = PgaOptions {
                eta: Some(eta),
                ..Default::default()
            };
            assert!(matches!(
                solve_pga(&w, &[0.0; 6], opts),
                Err(Error::Precondition(_))
            ));
        }
        let opts = PgaOptions {
            box_cap: Some(32768.0),
            ..Default::default()
        };
        assert!(matches!(
            solve_pga(&w, &[0.0; 6], opts),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn random_starts_reach_the_same_point() {
        let w = reference_workload();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let cap = w.stable_box_cap(DEFAULT_BOX_MARGIN);
        for _ in 0..10 {
            let init: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..cap)).collect();
            let r = solve_pga(
                &w,
                &init,
                PgaOptions {
                    tol: 1e-10,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.converged);
            for (x, o) in r.alloc.iter().zip(ORACLE) {
                assert!((x - o).abs() < 1e-4, "{x} vs {o}");
            }
        }
    }

    #[test]
    fn tiny_box_limits_the_solution() {
        let w = reference_workload();
        let r = solve_pga(
            &w,
            &[0.0; 6],
            PgaOptions {
                box_cap: Some(100.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.box_limited);
        assert_eq!(r.alloc[1], 100.0);
    }
}
