//! Pollaczek-Khinchine waiting time, mean system time, the utility
//! `J = α Σ π_k p_k(ℓ_k) - E[W] - E[S]`, and its exact gradient and Hessian.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::workload::{moments_unchecked, Workload};

/// Queue and utility figures at one allocation. Only produced for stable
/// allocations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueMetrics {
    pub es: f64,
    pub es2: f64,
    pub rho: f64,
    pub ew: f64,
    pub et_sys: f64,
    pub j: f64,
}

/// `∂J/∂ℓ_k`, workload order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient(pub Vec<f64>);

impl std::ops::Deref for Gradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Dense symmetric matrix of `∂²J/∂ℓ_k∂ℓ_j`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianMatrix {
    n: usize,
    data: Vec<f64>,
}

impl HessianMatrix {
    pub fn zeros(n: usize) -> Self {
        HessianMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.n + j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.data[k * self.n + j] = v;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    /// `zᵀ H z`.
    pub fn quadratic_form(&self, z: &[f64]) -> f64 {
        (0..self.n)
            .map(|k| z[k] * self.row(k).iter().zip(z).map(|(h, zj)| h * zj).sum::<f64>())
            .sum()
    }

    /// Max absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|k| self.row(k).iter().map(|h| h.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Everything downstream needs from one pass over the tasks.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Moments {
    pub es: f64,
    pub es2: f64,
    /// `1 - λ E[S]`, strictly positive.
    pub slack: f64,
}

pub(crate) fn stable_moments(w: &Workload, alloc: &[f64]) -> Result<Moments> {
    w.check_allocation(alloc)?;
    stable_moments_unchecked(w, alloc)
}

pub(crate) fn stable_moments_unchecked(w: &Workload, alloc: &[f64]) -> Result<Moments> {
    let (es, es2) = moments_unchecked(w.tasks(), alloc);
    let rho = w.lambda() * es;
    if !(rho < 1.0) {
        return Err(Error::Unstable { rho });
    }
    Ok(Moments {
        es,
        es2,
        slack: 1.0 - rho,
    })
}

/// `true` when `λ E[S] < 1`; no box check.
pub(crate) fn is_stable(w: &Workload, alloc: &[f64]) -> bool {
    let (es, _) = moments_unchecked(w.tasks(), alloc);
    w.lambda() * es < 1.0
}

fn mean_accuracy(w: &Workload, alloc: &[f64]) -> f64 {
    w.tasks()
        .iter()
        .zip(alloc)
        .map(|(t, &l)| t.pi * t.accuracy_unchecked(l))
        .sum()
}

pub fn queue_metrics(w: &Workload, alloc: &[f64]) -> Result<QueueMetrics> {
    let m = stable_moments(w, alloc)?;
    Ok(metrics_from(w, alloc, m))
}

pub(crate) fn metrics_from(w: &Workload, alloc: &[f64], m: Moments) -> QueueMetrics {
    let ew = w.lambda() * m.es2 / (2.0 * m.slack);
    let et_sys = ew + m.es;
    QueueMetrics {
        es: m.es,
        es2: m.es2,
        rho: 1.0 - m.slack,
        ew,
        et_sys,
        j: w.alpha() * mean_accuracy(w, alloc) - et_sys,
    }
}

/// Pollaczek-Khinchine mean wait `λ E[S²] / (2 (1 - λ E[S]))`.
pub fn mean_wait(w: &Workload, alloc: &[f64]) -> Result<f64> {
    Ok(queue_metrics(w, alloc)?.ew)
}

/// `E[T_sys] = E[W] + E[S]`.
pub fn mean_system_time(w: &Workload, alloc: &[f64]) -> Result<f64> {
    Ok(queue_metrics(w, alloc)?.et_sys)
}

pub fn objective_value(w: &Workload, alloc: &[f64]) -> Result<f64> {
    Ok(queue_metrics(w, alloc)?.j)
}

/// Objective without the box check; used by solvers on trial points.
pub(crate) fn objective_unchecked(w: &Workload, alloc: &[f64]) -> Result<f64> {
    let m = stable_moments_unchecked(w, alloc)?;
    Ok(metrics_from(w, alloc, m).j)
}

pub fn gradient(w: &Workload, alloc: &[f64]) -> Result<Gradient> {
    let m = stable_moments(w, alloc)?;
    Ok(Gradient(gradient_from(w, alloc, m)))
}

pub(crate) fn gradient_from(w: &Workload, alloc: &[f64], m: Moments) -> Vec<f64> {
    let lambda = w.lambda();
    let alpha = w.alpha();
    let queue_term = lambda * m.es2 / (2.0 * m.slack * m.slack);
    w.tasks()
        .iter()
        .zip(alloc)
        .map(|(t, &l)| {
            let gain = alpha * t.pi * t.a * t.b * (-t.b * l).exp();
            let wait = lambda * t.pi * t.c * (t.service_time_unchecked(l) / m.slack + queue_term);
            gain - wait - t.pi * t.c
        })
        .collect()
}

pub fn hessian(w: &Workload, alloc: &[f64]) -> Result<HessianMatrix> {
    let m = stable_moments(w, alloc)?;
    let lambda = w.lambda();
    let tasks = w.tasks();
    let n = tasks.len();
    let d = m.slack;
    let times: Vec<f64> = tasks
        .iter()
        .zip(alloc)
        .map(|(t, &l)| t.service_time_unchecked(l))
        .collect();
    let weights: Vec<f64> = tasks.iter().map(|t| t.pi * t.c).collect();

    let mut h = HessianMatrix::zeros(n);
    for k in 0..n {
        for j in k..n {
            let cross = lambda * lambda * weights[k] * weights[j] / (d * d)
                * (times[k] + times[j] + lambda * m.es2 / d);
            let mut wait_curv = cross;
            if k == j {
                let t = &tasks[k];
                wait_curv += lambda * t.pi * t.c * t.c / d;
            }
            let mut v = -wait_curv;
            if k == j {
                let t = &tasks[k];
                v -= w.alpha() * t.pi * t.a * t.b * t.b * (-t.b * alloc[k]).exp();
            }
            h.set(k, j, v);
            h.set(j, k, v);
        }
    }
    Ok(h)
}
