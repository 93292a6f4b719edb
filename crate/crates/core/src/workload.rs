//! Workload description: task types, service-time and accuracy curves,
//! aggregate service moments and the stability test.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// Mixture weights may drift from 1 by at most this much before
/// validation rejects them; smaller drift is renormalized away.
pub const PI_SUM_TOLERANCE: f64 = 1e-9;

/// Slack allowed on `A + D <= 1` for fitted values that print as exactly 1.
const CEILING_SLACK: f64 = 1e-12;

/// One query category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskType {
    pub name: String,
    /// Mixture probability.
    pub pi: f64,
    /// Accuracy amplitude.
    #[serde(rename = "A")]
    pub a: f64,
    /// Accuracy saturation rate, per token.
    pub b: f64,
    /// Accuracy floor at zero reasoning tokens.
    #[serde(rename = "D")]
    pub d: f64,
    /// Fixed per-query overhead in seconds (prefill, weight loading).
    pub t0: f64,
    /// Seconds per reasoning token.
    pub c: f64,
}

impl TaskType {
    /// Deterministic service time `t0 + c * l` of a query given `l` tokens.
    pub fn service_time(&self, l: f64) -> Result<f64> {
        check_tokens(l)?;
        Ok(self.service_time_unchecked(l))
    }

    /// Probability of a correct answer, `A (1 - exp(-b l)) + D`.
    pub fn accuracy(&self, l: f64) -> Result<f64> {
        check_tokens(l)?;
        Ok(self.accuracy_unchecked(l))
    }

    #[inline]
    pub(crate) fn service_time_unchecked(&self, l: f64) -> f64 {
        self.t0 + self.c * l
    }

    #[inline]
    pub(crate) fn accuracy_unchecked(&self, l: f64) -> f64 {
        self.a * -(-self.b * l).exp_m1() + self.d
    }

    fn violations(&self, k: usize, out: &mut Vec<Violation>) {
        let mut bad = |msg: String| {
            out.push(Violation {
                task: Some(k),
                message: msg,
            })
        };
        let fields = [
            ("pi", self.pi),
            ("A", self.a),
            ("b", self.b),
            ("D", self.d),
            ("t0", self.t0),
            ("c", self.c),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                bad(format!("{name} must be finite, got {v}"));
            }
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            bad(format!("pi must lie in (0, 1], got {}", self.pi));
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            bad(format!("A must lie in (0, 1], got {}", self.a));
        }
        if !(self.d >= 0.0 && self.d <= 1.0) {
            bad(format!("D must lie in [0, 1], got {}", self.d));
        }
        if self.a + self.d > 1.0 + CEILING_SLACK {
            bad(format!("A + D must not exceed 1, got {}", self.a + self.d));
        }
        if !(self.b > 0.0) {
            bad(format!("b must be positive, got {}", self.b));
        }
        if !(self.t0 >= 0.0) {
            bad(format!("t0 must be nonnegative, got {}", self.t0));
        }
        if !(self.c > 0.0) {
            bad(format!("c must be positive, got {}", self.c));
        }
    }
}

fn check_tokens(l: f64) -> Result<()> {
    if l >= 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "token budget must be finite and nonnegative, got {l}"
        )))
    }
}

/// Unvalidated workload as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub lambda: f64,
    pub alpha: f64,
    pub l_max: f64,
    pub tasks: Vec<TaskType>,
}

/// A validated workload. Construct through [`validate_workload`] (or
/// [`Workload::new`]); every field invariant holds afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorkloadSpec", into = "WorkloadSpec")]
pub struct Workload {
    lambda: f64,
    alpha: f64,
    l_max: f64,
    tasks: Vec<TaskType>,
}

impl TryFrom<WorkloadSpec> for Workload {
    type Error = Error;

    fn try_from(spec: WorkloadSpec) -> Result<Self> {
        validate_workload(spec)
    }
}

impl From<Workload> for WorkloadSpec {
    fn from(w: Workload) -> Self {
        WorkloadSpec {
            lambda: w.lambda,
            alpha: w.alpha,
            l_max: w.l_max,
            tasks: w.tasks,
        }
    }
}

/// Checks every task and workload invariant, reporting all violations at
/// once. Mixture weights within [`PI_SUM_TOLERANCE`] of 1 are rescaled to
/// sum to 1.
pub fn validate_workload(spec: WorkloadSpec) -> Result<Workload> {
    let WorkloadSpec {
        lambda,
        alpha,
        l_max,
        mut tasks,
    } = spec;
    let mut errs = Vec::new();
    let mut global = |msg: String| {
        errs.push(Violation {
            task: None,
            message: msg,
        })
    };

    if tasks.is_empty() {
        global("workload needs at least one task".into());
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        global(format!("lambda must be positive and finite, got {lambda}"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        global(format!("alpha must be nonnegative and finite, got {alpha}"));
    }
    if !(l_max >= 0.0 && l_max.is_finite()) {
        global(format!("l_max must be nonnegative and finite, got {l_max}"));
    }
    let pi_sum: f64 = tasks.iter().map(|t| t.pi).sum();
    if !tasks.is_empty() && (pi_sum - 1.0).abs() > PI_SUM_TOLERANCE {
        global(format!("mixture weights pi must sum to 1, got {pi_sum}"));
    }
    let base_load = lambda * tasks.iter().map(|t| t.pi * t.t0).sum::<f64>();
    if !(base_load < 1.0) {
        global(format!(
            "base feasibility violated: lambda * sum(pi * t0) = {base_load} >= 1, \
             so even the zero allocation is unstable"
        ));
    }
    for (k, t) in tasks.iter().enumerate() {
        t.violations(k, &mut errs);
    }

    if !errs.is_empty() {
        return Err(Error::InvalidWorkload(errs));
    }
    // Sums within a few ulps of 1 are left alone so that reloading a
    // serialized workload is the identity.
    if (pi_sum - 1.0).abs() > 8.0 * f64::EPSILON {
        for t in &mut tasks {
            t.pi /= pi_sum;
        }
    }
    Ok(Workload {
        lambda,
        alpha,
        l_max,
        tasks,
    })
}

impl Workload {
    pub fn new(lambda: f64, alpha: f64, l_max: f64, tasks: Vec<TaskType>) -> Result<Self> {
        validate_workload(WorkloadSpec {
            lambda,
            alpha,
            l_max,
            tasks,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: WorkloadSpec = serde_json::from_str(text)?;
        validate_workload(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload serializes")
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn tasks(&self) -> &[TaskType] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    /// Same tasks with a different arrival rate, revalidated.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.alpha, self.l_max, self.tasks.clone())
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.lambda, alpha, self.l_max, self.tasks.clone())
    }

    pub fn with_l_max(&self, l_max: f64) -> Result<Self> {
        Self::new(self.lambda, self.alpha, l_max, self.tasks.clone())
    }

    /// Checks length and box membership of an allocation.
    pub fn check_allocation(&self, alloc: &[f64]) -> Result<()> {
        if alloc.len() != self.tasks.len() {
            return Err(Error::Shape {
                expected: self.tasks.len(),
                got: alloc.len(),
            });
        }
        for (k, &l) in alloc.iter().enumerate() {
            if !(l >= 0.0 && l <= self.l_max) {
                return Err(Error::Domain(format!(
                    "allocation entry {k} = {l} outside [0, {}]",
                    self.l_max
                )));
            }
        }
        Ok(())
    }

    /// `λ · Σ π_k t0_k`, the load of the zero allocation.
    pub fn base_utilization(&self) -> f64 {
        self.lambda * self.tasks.iter().map(|t| t.pi * t.t0).sum::<f64>()
    }

    /// `Σ π_k c_k`.
    pub fn mean_token_cost(&self) -> f64 {
        self.tasks.iter().map(|t| t.pi * t.c).sum()
    }

    /// Uniform budget at which utilization reaches `target_rho`, unclamped.
    pub fn uniform_budget_for_rho(&self, target_rho: f64) -> f64 {
        (target_rho / self.lambda - self.base_utilization() / self.lambda) / self.mean_token_cost()
    }

    /// Largest uniform cap `B <= l_max` with `λ E[S]` at the all-`B` corner
    /// no larger than `1 - margin`. Zero when even the origin exceeds it.
    pub fn stable_box_cap(&self, margin: f64) -> f64 {
        self.uniform_budget_for_rho(1.0 - margin).clamp(0.0, self.l_max)
    }

    /// Worst-case service quantities over the box `[0, box_cap]^N`.
    pub fn envelope(&self, box_cap: f64) -> BoxEnvelope {
        let t_max_per_task: Vec<f64> = self
            .tasks
            .iter()
            .map(|t| t.service_time_unchecked(box_cap))
            .collect();
        let t_max = t_max_per_task.iter().copied().fold(f64::MIN, f64::max);
        let es_max = self
            .tasks
            .iter()
            .zip(&t_max_per_task)
            .map(|(t, tm)| t.pi * tm)
            .sum::<f64>();
        let es2_max = self
            .tasks
            .iter()
            .zip(&t_max_per_task)
            .map(|(t, tm)| t.pi * tm * tm)
            .sum::<f64>();
        BoxEnvelope {
            box_cap,
            t_max_per_task,
            t_max,
            es_max,
            es2_max,
            rho_max: self.lambda * es_max,
        }
    }
}

/// Service-time extremes over a uniform box, shared by the contraction
/// and Lipschitz certificates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxEnvelope {
    pub box_cap: f64,
    pub t_max_per_task: Vec<f64>,
    pub t_max: f64,
    pub es_max: f64,
    pub es2_max: f64,
    pub rho_max: f64,
}

/// Real-valued token budgets, one per task, in workload order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(pub Vec<f64>);

impl Allocation {
    pub fn zeros(n: usize) -> Self {
        Allocation(vec![0.0; n])
    }

    pub fn uniform(n: usize, l: f64) -> Self {
        Allocation(vec![l; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Allocation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Allocation {
    fn from(v: Vec<f64>) -> Self {
        Allocation(v)
    }
}

/// `t_k(l) = t0_k + c_k l`.
pub fn service_time(task: &TaskType, l: f64) -> Result<f64> {
    task.service_time(l)
}

/// `p_k(l) = A_k (1 - e^{-b_k l}) + D_k`.
pub fn accuracy(task: &TaskType, l: f64) -> Result<f64> {
    task.accuracy(l)
}

/// First and second moments `(E[S], E[S^2])` of the mixed service time.
pub fn service_moments(w: &Workload, alloc: &[f64]) -> Result<(f64, f64)> {
    w.check_allocation(alloc)?;
    Ok(moments_unchecked(w.tasks(), alloc))
}

pub(crate) fn moments_unchecked(tasks: &[TaskType], alloc: &[f64]) -> (f64, f64) {
    tasks.iter().zip(alloc).fold((0.0, 0.0), |(m1, m2), (t, &l)| {
        let s = t.service_time_unchecked(l);
        (m1 + t.pi * s, m2 + t.pi * s * s)
    })
}

/// `ρ = λ E[S]`. Values at or above 1 mean the queue is unstable.
pub fn utilization(w: &Workload, alloc: &[f64]) -> Result<f64> {
    let (es, _) = service_moments(w, alloc)?;
    Ok(w.lambda() * es)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::reference_workload;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gsm8k() -> TaskType {
        reference_workload().tasks()[1].clone()
    }

    #[test]
    fn service_time_matches_affine_model() {
        let t = gsm8k();
        assert_eq!(t.service_time(0.0).unwrap(), 0.1459);
        assert_abs_diff_eq!(t.service_time(340.5).unwrap(), 4.94695, epsilon = 1e-12);
        assert!(matches!(t.service_time(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn accuracy_endpoints() {
        let w = reference_workload();
        for t in w.tasks() {
            assert_eq!(t.accuracy(0.0).unwrap(), t.d);
        }
        assert_abs_diff_eq!(gsm8k().accuracy(1e9).unwrap(), 1.0, epsilon = 1e-12);
        let arc = &w.tasks()[5];
        // 0.3933 * (1 - exp(-4.9966)) + 0.490
        assert_abs_diff_eq!(arc.accuracy(30.1).unwrap(), 0.880641, epsilon = 1e-6);
        assert!(arc.accuracy(f64::NAN).is_err());
    }

    #[test]
    fn reference_moments_at_zero() {
        let w = reference_workload();
        let (es, es2) = service_moments(&w, &[0.0; 6]).unwrap();
        assert_abs_diff_eq!(es, 0.122383333, epsilon = 1e-8);
        assert_abs_diff_eq!(es2, 0.019168705, epsilon = 1e-9);
        assert_abs_diff_eq!(utilization(&w, &[0.0; 6]).unwrap(), 0.0122383333, epsilon = 1e-9);
        assert_abs_diff_eq!(utilization(&w, &[500.0; 6]).unwrap(), 0.643071667, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_constant_service() {
        let w = Workload::new(
            0.5,
            1.0,
            100.0,
            vec![TaskType {
                name: "x".into(),
                pi: 1.0,
                a: 0.5,
                b: 0.1,
                d: 0.0,
                t0: 1.0,
                c: f64::MIN_POSITIVE,
            }],
        )
        .unwrap();
        let (m1, m2) = service_moments(&w, &[37.0]).unwrap();
        assert_abs_diff_eq!(m1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = reference_workload();
        assert!(matches!(
            service_moments(&w, &[0.0; 3]),
            Err(Error::Shape { expected: 6, got: 3 })
        ));
    }

    #[test]
    fn validation_names_each_violation() {
        let mut spec: WorkloadSpec = reference_workload().into();
        for t in &mut spec.tasks {
            t.pi = 1.0 / 12.0;
        }
        spec.tasks[2].b = -1.0;
        let err = validate_workload(spec).unwrap_err();
        let Error::InvalidWorkload(v) = err else {
            panic!("wrong error kind")
        };
        assert!(v
            .iter()
            .any(|x| x.task.is_none() && x.message.contains("sum to 1")));
        assert!(v
            .iter()
            .any(|x| x.task == Some(2) && x.message.contains("b must")));
    }

    #[test]
    fn validation_rejects_unstable_origin() {
        let spec: WorkloadSpec = reference_workload().into();
        let spec = WorkloadSpec {
            lambda: 1.0 / 0.12,
            ..spec
        };
        let err = validate_workload(spec).unwrap_err().to_string();
        assert!(err.contains("base feasibility"), "{err}");
    }

    #[test]
    fn small_pi_drift_is_renormalized() {
        let mut spec: WorkloadSpec = reference_workload().into();
        spec.tasks[0].pi += 5e-10;
        let w = validate_workload(spec).unwrap();
        let s: f64 = w.tasks().iter().map(|t| t.pi).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_keeps_short_keys() {
        let w = reference_workload();
        let text = w.to_json_pretty();
        assert!(text.contains("\"A\"") && text.contains("\"D\"") && text.contains("\"t0\""));
        assert_eq!(Workload::from_json(&text).unwrap(), w);
    }

    #[test]
    fn stable_box_cap_hits_target_load() {
        let w = reference_workload();
        let cap = w.stable_box_cap(0.05);
        assert_abs_diff_eq!(w.envelope(cap).rho_max, 0.95, epsilon = 1e-12);
        assert!(cap < w.l_max());
    }

    proptest! {
        #[test]
        fn accuracy_is_increasing_and_concave(
            k in 0usize..6,
            u1 in 0.0f64..1.0,
            v1 in 0.01f64..1.0,
            v2 in 0.01f64..1.0,
        ) {
            let w = reference_workload();
            let t = &w.tasks()[k];
            // Stay where e^{-b l} is resolvable in f64.
            let scale = 5.0 / t.b;
            let (l1, d1, d2) = (u1 * scale, v1 * scale, v2 * scale);
            let (l2, l3) = (l1 + d1, l1 + d1 + d2);
            let (p1, p2, p3) = (
                t.accuracy(l1).unwrap(),
                t.accuracy(l2).unwrap(),
                t.accuracy(l3).unwrap(),
            );
            prop_assert!(p1 < p2 && p2 < p3);
            prop_assert!((p2 - p1) / d1 > (p3 - p2) / d2);
        }

        #[test]
        fn service_time_is_affine(k in 0usize..6, l1 in 0.0f64..3e4, l2 in 0.0f64..3e4) {
            let w = reference_workload();
            let t = &w.tasks()[k];
            let lhs = t.service_time(l1).unwrap() + t.service_time(l2).unwrap();
            let rhs = 2.0 * t.service_time((l1 + l2) / 2.0).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn second_moment_dominates_squared_mean(alloc in prop::collection::vec(0.0f64..32768.0, 6)) {
            let w = reference_workload();
            let (m1, m2) = service_moments(&w, &alloc).unwrap();
            prop_assert!(m2 - m1 * m1 >= -1e-12 * m2.max(1.0));
        }

        #[test]
        fn utilization_is_monotone(
            alloc in prop::collection::vec(0.0f64..1000.0, 6),
            k in 0usize..6,
            bump in 0.0f64..100.0,
        ) {
            let w = reference_workload();
            let mut up = alloc.clone();
            up[k] += bump;
            prop_assert!(utilization(&w, &up).unwrap() >= utilization(&w, &alloc).unwrap());
        }
    }
}
