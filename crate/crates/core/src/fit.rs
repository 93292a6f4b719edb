//! Fitting the affine latency line and the saturating accuracy curve to
//! measured points.
//!
//! Accuracy uses separable least squares: for a fixed rate `b` the model
//! `A (1 - e^{-b l}) + D` is linear in `(A, D)`, so the inner problem is a
//! two-variable constrained QP solved exactly. The outer search over `b`
//! scans a log grid and polishes the best cell with golden-section search.

use serde::Serialize;

use crate::error::{Error, Result};

const B_MIN: f64 = 1e-6;
const B_MAX: f64 = 1.0;
const B_GRID: usize = 200;
/// Smallest amplitude kept, so fitted tasks stay valid (`A > 0`).
const A_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSeries {
    pub points: Vec<(f64, f64)>,
}

impl MeasurementSeries {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        MeasurementSeries { points }
    }

    pub fn push(&mut self, l: f64, y: f64) {
        self.points.push((l, y));
    }

    fn check(&self, min_points: usize) -> Result<()> {
        if let Some((l, _)) = self.points.iter().find(|(l, _)| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Fit(format!(
                "token budget {l} is not a finite nonnegative value"
            )));
        }
        if let Some((_, y)) = self.points.iter().find(|(_, y)| !y.is_finite()) {
            return Err(Error::Fit(format!("observation {y} is not finite")));
        }
        let mut ls: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        ls.sort_by(f64::total_cmp);
        ls.dedup();
        if ls.len() < min_points {
            return Err(Error::Fit(format!(
                "need at least {min_points} distinct token budgets, got {}",
                ls.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyParams {
    pub t0: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyParams {
    #[serde(rename = "A")]
    pub a: f64,
    pub b: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl AccuracyParams {
    pub fn eval(&self, l: f64) -> f64 {
        self.a * -(-self.b * l).exp_m1() + self.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult<P> {
    pub params: P,
    pub rmse: f64,
    pub n_points: usize,
    /// Points dropped before fitting, with the reason.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Ordinary least squares for `y = t0 + c l`, with `t0` pinned to zero
/// (and `c` refit through the origin) if the free intercept is negative.
pub fn fit_latency(series: &MeasurementSeries) -> Result<FitResult<LatencyParams>> {
    series.check(2)?;
    let pts = &series.points;
    let n = pts.len() as f64;
    let lbar = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - lbar).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - lbar) * (p.1 - ybar)).sum();
    let mut c = sxy / sxx;
    let mut t0 = ybar - c * lbar;
    if t0 < 0.0 {
        t0 = 0.0;
        c = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / pts.iter().map(|p| p.0 * p.0).sum::<f64>();
    }
    if !(c > 0.0) {
        return Err(Error::Fit(format!(
            "latency does not increase with the token budget (slope {c})"
        )));
    }
    let rmse = (pts.iter().map(|p| (t0 + c * p.0 - p.1).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FitResult {
        params: LatencyParams { t0, c },
        rmse,
        n_points: pts.len(),
        warnings: Vec::new(),
    })
}

/// Best `(A, D)` for fixed features `x_i = 1 - e^{-b l_i}` subject to
/// `A >= A_FLOOR`, `D >= 0`, `A + D <= 1`. Returns `(A, D, sse)`.
fn inner_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let sse = |a: f64, d: f64| -> f64 { x.iter().zip(y).map(|(xi, yi)| (a * xi + d - yi).powi(2)).sum() };
    let feasible = |a: f64, d: f64| (A_FLOOR..=1.0).contains(&a) && d >= 0.0 && a + d <= 1.0;

    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - xbar).powi(2)).sum();
    if sxx > 0.0 {
        let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - xbar) * (yi - ybar)).sum();
        let a = sxy / sxx;
        let d = ybar - a * xbar;
        if feasible(a, d) {
            return (a, d, sse(a, d));
        }
    }

    // Optimum lies on the boundary: minimize along each edge.
    let mut cands = Vec::with_capacity(3);
    // D = 0.
    let sx2: f64 = x.iter().map(|v| v * v).sum();
    let a = if sx2 > 0.0 {
        x.iter().zip(y).map(|(xi, yi)| xi * yi).sum::<f64>() / sx2
    } else {
        A_FLOOR
    };
    cands.push((a.clamp(A_FLOOR, 1.0), 0.0));
    // A = A_FLOOR.
    let d = ybar - A_FLOOR * xbar;
    cands.push((A_FLOOR, d.clamp(0.0, 1.0 - A_FLOOR)));
    // A + D = 1.
    let s11: f64 = x.iter().map(|xi| (xi - 1.0).powi(2)).sum();
    let a = if s11 > 0.0 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| (xi - 1.0) * (yi - 1.0))
            .sum::<f64>()
            / s11
    } else {
        1.0
    };
    let a = a.clamp(A_FLOOR, 1.0);
    cands.push((a, 1.0 - a));

    cands
        .into_iter()
        .map(|(a, d)| (a, d, sse(a, d)))
        .min_by(|p, q| p.2.total_cmp(&q.2))
        .expect("three candidates")
}

fn features(ls: &[f64], b: f64) -> Vec<f64> {
    ls.iter().map(|l| -(-b * l).exp_m1()).collect()
}

/// Separable least-squares fit of `A (1 - e^{-b l}) + D`.
///
/// Observations outside `[0, 1]` are dropped and reported in `warnings`.
pub fn fit_accuracy(series: &MeasurementSeries) -> Result<FitResult<AccuracyParams>> {
    let mut warnings = Vec::new();
    let kept: Vec<(f64, f64)> = series
        .points
        .iter()
        .copied()
        .filter(|&(l, y)| {
            let ok = (0.0..=1.0).contains(&y);
            if !ok {
                warnings.push(format!("dropped point (l = {l}, accuracy = {y}): outside [0, 1]"));
            }
            ok
        })
        .collect();
    let kept = MeasurementSeries::new(kept);
    kept.check(3)?;
    let ls: Vec<f64> = kept.points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = kept.points.iter().map(|p| p.1).collect();
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(Error::Fit(
            "all accuracy observations are identical; b is unidentifiable".into(),
        ));
    }

    let objective = |log_b: f64| inner_fit(&features(&ls, log_b.exp()), &ys).2;
    let (lo, hi) = (B_MIN.ln(), B_MAX.ln());
    let grid: Vec<f64> = (0..B_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / (B_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|p, q| p.1.total_cmp(q.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let left = grid[best.saturating_sub(1)];
    let right = grid[(best + 1).min(B_GRID - 1)];
    let (mut log_b, mut sse) = golden_section(objective, left, right);
    if values[best] < sse {
        log_b = grid[best];
        sse = values[best];
    }

    let b = log_b.exp();
    let (a, d, _) = inner_fit(&features(&ls, b), &ys);
    Ok(FitResult {
        params: AccuracyParams { a, b, d },
        rmse: (sse / ys.len() as f64).sqrt(),
        n_points: ys.len(),
        warnings,
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
