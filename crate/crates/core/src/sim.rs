//! Discrete-event simulation of the FIFO M/G/1 server.
//!
//! Arrivals are Poisson at rate `λ` (exponential gaps by inverse CDF),
//! each query draws its type from `π`, is served for exactly
//! `t_k(ℓ_k)` seconds and answers correctly with probability `p_k(ℓ_k)`.
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`): the seed
//! selects the key and `SimConfig::stream` selects one of 2^64 independent
//! streams, so replications never share state and are reproducible
//! bit-for-bit. Each arrival consumes exactly three 64-bit words in a
//! fixed order (gap, type, correctness).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::queue_metrics;
use crate::workload::{moments_unchecked, Workload};

/// Above this utilization the comparison report marks the run high-variance.
pub const HIGH_VARIANCE_RHO: f64 = 0.9;

/// z-score threshold for the analytic comparison.
pub const Z_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_arrivals: usize,
    pub seed: u64,
    /// ChaCha stream id; one per replication.
    pub stream: u64,
    pub warmup_fraction: f64,
    pub n_batches: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_arrivals: 100_000,
            seed: 0,
            stream: 0,
            warmup_fraction: 0.1,
            n_batches: 32,
        }
    }
}

impl SimConfig {
    fn warmup(&self) -> usize {
        (self.n_arrivals as f64 * self.warmup_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.n_batches < 2 {
            return Err(Error::Config(format!(
                "n_batches must be at least 2, got {}",
                self.n_batches
            )));
        }
        let kept = self.n_arrivals - self.warmup();
        if kept < self.n_batches * 10 {
            return Err(Error::Config(format!(
                "{kept} arrivals after warmup is fewer than 10 per batch for {} batches",
                self.n_batches
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStats {
    pub served: usize,
    pub mean_wait: f64,
    pub stderr_wait: f64,
    pub mean_service: f64,
    pub mean_system: f64,
    pub stderr_system: f64,
    pub per_type_accuracy: Vec<f64>,
    pub per_type_counts: Vec<usize>,
    /// Fraction of post-warmup queries answered correctly.
    pub accuracy: f64,
    /// `α · accuracy - mean_system`.
    pub empirical_j: f64,
    pub stderr_j: f64,
    /// Time-average number in system over the observation window.
    pub mean_in_system: f64,
    pub stderr_in_system: f64,
    /// Utilization implied by the allocation.
    pub rho: f64,
    /// `rho >= 1`: the statistics describe a transient, not a steady state.
    pub nonstationary: bool,
}

/// One served query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryRecord {
    pub arrival_time: f64,
    pub task: usize,
    pub wait: f64,
    pub system_time: f64,
    pub correct: bool,
}

/// Raw stream: interarrival gap before each query, its type, service time
/// and correctness.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalStream {
    pub gaps: Vec<f64>,
    pub tasks: Vec<usize>,
    pub service: Vec<f64>,
    pub correct: Vec<bool>,
}

pub fn generate_stream(w: &Workload, alloc: &[f64], cfg: &SimConfig) -> Result<ArrivalStream> {
    w.check_allocation(alloc)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let tasks = w.tasks();
    let mut cdf = Vec::with_capacity(tasks.len());
    let mut acc = 0.0;
    for t in tasks {
        acc += t.pi;
        cdf.push(acc);
    }
    let service: Vec<f64> = tasks
        .iter()
        .zip(alloc)
        .map(|(t, &l)| t.service_time_unchecked(l))
        .collect();
    let p_ok: Vec<f64> = tasks
        .iter()
        .zip(alloc)
        .map(|(t, &l)| t.accuracy_unchecked(l))
        .collect();
    let lambda = w.lambda();

    let n = cfg.n_arrivals;
    let mut out = ArrivalStream {
        gaps: Vec::with_capacity(n),
        tasks: Vec::with_capacity(n),
        service: Vec::with_capacity(n),
        correct: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let u: f64 = rng.random();
        out.gaps.push(-(1.0 - u).ln() / lambda);
        let v: f64 = rng.random();
        let k = cdf.iter().position(|&c| v < c).unwrap_or(tasks.len() - 1);
        out.tasks.push(k);
        out.service.push(service[k]);
        let r: f64 = rng.random();
        out.correct.push(r < p_ok[k]);
    }
    Ok(out)
}

/// Waiting times by the Lindley recursion `W_{n+1} = max(0, W_n + S_n - A_{n+1})`.
pub fn lindley_waits(stream: &ArrivalStream) -> Vec<f64> {
    let n = stream.gaps.len();
    let mut waits = Vec::with_capacity(n);
    let mut w = 0.0;
    for i in 0..n {
        if i > 0 {
            w = (w + stream.service[i - 1] - stream.gaps[i]).max(0.0);
        }
        waits.push(w);
    }
    waits
}

/// Output of the event-driven pass.
struct EventRun {
    records: Vec<QueryRecord>,
    /// Cumulative `∫ N(t) dt` from the first arrival, sampled at each arrival instant.
    area_at_arrival: Vec<f64>,
}

/// Event-driven FIFO server. Each arrival sees the unfinished work left
/// in the system, drained by the time elapsed since the previous arrival;
/// that backlog is its wait. Departure instants are kept to integrate
/// `N(t)` between events.
fn run_events(stream: &ArrivalStream) -> EventRun {
    let n = stream.gaps.len();
    let mut records = Vec::with_capacity(n);
    let mut area_at_arrival = Vec::with_capacity(n);
    let mut departures: VecDeque<f64> = VecDeque::new();
    let mut clock = 0.0;
    let mut last_event = 0.0;
    let mut area = 0.0;
    // Unfinished work just after the previous arrival joined.
    let mut work: Option<f64> = None;
    let mut last_departure = 0.0f64;

    for i in 0..n {
        clock += stream.gaps[i];
        while let Some(&d) = departures.front() {
            if d > clock {
                break;
            }
            area += departures.len() as f64 * (d - last_event);
            last_event = d;
            departures.pop_front();
        }
        area += departures.len() as f64 * (clock - last_event);
        last_event = clock;
        area_at_arrival.push(area);

        let wait = work.map_or(0.0, |v| (v - stream.gaps[i]).max(0.0));
        let system_time = wait + stream.service[i];
        work = Some(system_time);
        // FIFO departures are ordered; the max only guards against rounding.
        last_departure = (clock + system_time).max(last_departure);
        departures.push_back(last_departure);
        records.push(QueryRecord {
            arrival_time: clock,
            task: stream.tasks[i],
            wait,
            system_time,
            correct: stream.correct[i],
        });
    }
    EventRun {
        records,
        area_at_arrival,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the grand mean from batch means.
fn batch_stderr(batch_means: &[f64]) -> f64 {
    let b = batch_means.len() as f64;
    let m = mean(batch_means);
    let var = batch_means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

fn batched<F: Fn(&QueryRecord) -> f64>(recs: &[QueryRecord], n_batches: usize, f: F) -> (f64, f64) {
    let size = recs.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| recs[b * size..(b + 1) * size].iter().map(&f).sum::<f64>() / size as f64)
        .collect();
    let grand = recs.iter().map(&f).sum::<f64>() / recs.len() as f64;
    (grand, batch_stderr(&means))
}

pub fn simulate(w: &Workload, alloc: &[f64], cfg: &SimConfig) -> Result<SimStats> {
    simulate_with_records(w, alloc, cfg).map(|(s, _)| s)
}

/// Runs the simulation and also returns the per-query records
/// (warmup included, flagged by index `< warmup_fraction · n`).
pub fn simulate_with_records(
    w: &Workload,
    alloc: &[f64],
    cfg: &SimConfig,
) -> Result<(SimStats, Vec<QueryRecord>)> {
    cfg.validate()?;
    let stream = generate_stream(w, alloc, cfg)?;
    let run = run_events(&stream);
    let warm = cfg.warmup();
    let kept = &run.records[warm..];
    let nb = cfg.n_batches;

    let (mean_wait, stderr_wait) = batched(kept, nb, |r| r.wait);
    let (mean_system, stderr_system) = batched(kept, nb, |r| r.system_time);
    let alpha = w.alpha();
    let (empirical_j, stderr_j) = batched(kept, nb, |r| {
        alpha * f64::from(u8::from(r.correct)) - r.system_time
    });
    let mean_service = mean_system - mean_wait;

    let n_types = w.len();
    let mut counts = vec![0usize; n_types];
    let mut hits = vec![0usize; n_types];
    for r in kept {
        counts[r.task] += 1;
        hits[r.task] += usize::from(r.correct);
    }
    let per_type_accuracy = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
        .collect();
    let accuracy = hits.iter().sum::<usize>() as f64 / kept.len() as f64;

    // Time-average number in system between the first kept arrival and the
    // last arrival, batched on the same customer boundaries.
    let size = kept.len() / nb;
    let window = |from: usize, to: usize| {
        let area = run.area_at_arrival[to] - run.area_at_arrival[from];
        let span = run.records[to].arrival_time - run.records[from].arrival_time;
        area / span
    };
    let last = run.records.len() - 1;
    let mean_in_system = window(warm, last);
    let batch_l: Vec<f64> = (0..nb)
        .map(|b| {
            let from = warm + b * size;
            let to = (warm + (b + 1) * size).min(last);
            window(from, to)
        })
        .collect();

    let (es, _) = moments_unchecked(w.tasks(), alloc);
    let rho = w.lambda() * es;
    let stats = SimStats {
        served: kept.len(),
        mean_wait,
        stderr_wait,
        mean_service,
        mean_system,
        stderr_system,
        per_type_accuracy,
        per_type_counts: counts,
        accuracy,
        empirical_j: alpha * accuracy - mean_system,
        stderr_j,
        mean_in_system,
        stderr_in_system: batch_stderr(&batch_l),
        rho,
        nonstationary: !(rho < 1.0),
    };
    debug_assert!((stats.empirical_j - empirical_j).abs() <= 1e-9 * empirical_j.abs().max(1.0));
    Ok((stats, run.records))
}

/// Independent replications on streams `0..n`, in stream order.
pub fn replicate(w: &Workload, alloc: &[f64], cfg: &SimConfig, n: u64) -> Result<Vec<SimStats>> {
    (0..n)
        .into_par_iter()
        .map(|s| simulate(w, alloc, &SimConfig { stream: s, ..*cfg }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub analytic: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub z: f64,
}

impl Comparison {
    fn new(analytic: f64, empirical: f64, stderr: f64) -> Self {
        let z = if stderr > 0.0 {
            (empirical - analytic) / stderr
        } else if empirical == analytic {
            0.0
        } else {
            f64::INFINITY
        };
        Comparison {
            analytic,
            empirical,
            stderr,
            z,
        }
    }

    pub fn passes(&self) -> bool {
        self.z.abs() <= Z_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PkComparison {
    pub rho: f64,
    pub mean_wait: Comparison,
    pub mean_system: Comparison,
    pub utility: Comparison,
    pub pass: bool,
    pub high_variance: bool,
}

/// Puts the simulated estimates next to the closed forms. Unstable
/// allocations yield an error since no analytic value exists.
pub fn compare_to_pk(stats: &SimStats, w: &Workload, alloc: &[f64]) -> Result<PkComparison> {
    let m = queue_metrics(w, alloc)?;
    let mean_wait = Comparison::new(m.ew, stats.mean_wait, stats.stderr_wait);
    let mean_system = Comparison::new(m.et_sys, stats.mean_system, stats.stderr_system);
    let utility = Comparison::new(m.j, stats.empirical_j, stats.stderr_j);
    Ok(PkComparison {
        rho: m.rho,
        pass: mean_wait.passes() && mean_system.passes() && utility.passes(),
        mean_wait,
        mean_system,
        utility,
        high_variance: m.rho >= HIGH_VARIANCE_RHO,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{mean_wait, objective_value};
    use crate::presets::reference_workload;

    fn cfg(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_arrivals: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig {
            warmup_fraction: 1.0,
            ..cfg(1000, 0)
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            n_batches: 1,
            ..cfg(1000, 0)
        }
        .validate()
        .is_err());
        assert!(cfg(300, 0).validate().is_err());
        assert!(cfg(400, 0).validate().is_ok());
        let w = reference_workload();
        assert!(matches!(
            simulate(&w, &[0.0; 6], &cfg(10, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn event_engine_matches_lindley() {
        let w = reference_workload();
        let alloc = [0.0, 340.0, 0.0, 0.0, 346.0, 30.0];
        let stream = generate_stream(&w, &alloc, &cfg(200_000, 7)).unwrap();
        let lindley = lindley_waits(&stream);
        let run = run_events(&stream);
        assert!(lindley.iter().any(|&w| w > 0.0));
        for (r, lw) in run.records.iter().zip(&lindley) {
            assert_eq!(r.wait.to_bits(), lw.to_bits());
        }
    }

    #[test]
    fn bit_identical_replay() {
        let w = reference_workload();
        let a = simulate(&w, &[100.0; 6], &cfg(20_000, 42)).unwrap();
        let b = simulate(&w, &[100.0; 6], &cfg(20_000, 42)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = simulate(
            &w,
            &[100.0; 6],
            &SimConfig {
                stream: 1,
                ..cfg(20_000, 42)
            },
        )
        .unwrap();
        assert_ne!(a.mean_wait, c.mean_wait);
    }

    #[test]
    fn sample_means_are_consistent() {
        let w = reference_workload();
        let s = simulate(&w, &[200.0; 6], &cfg(50_000, 1)).unwrap();
        assert!((s.mean_system - (s.mean_wait + s.mean_service)).abs() < 1e-9);
        assert_eq!(s.per_type_counts.iter().sum::<usize>(), s.served);
        assert!(!s.nonstationary);
    }

    #[test]
    fn pk_mean_wait_at_zero_budget() {
        let w = reference_workload();
        let alloc = [0.0; 6];
        let s = simulate(&w, &alloc, &cfg(1_000_000, 2)).unwrap();
        let ew = mean_wait(&w, &alloc).unwrap();
        assert!(
            (s.mean_wait - ew).abs() <= 3.0 * s.stderr_wait,
            "{} vs {ew}",
            s.mean_wait
        );
    }

    #[test]
    fn per_type_accuracy_matches_bernoulli_mean() {
        let w = reference_workload();
        let alloc = [50.0, 340.0, 0.0, 10.0, 346.0, 30.0];
        let s = simulate(&w, &alloc, &cfg(400_000, 3)).unwrap();
        for (k, t) in w.tasks().iter().enumerate() {
            let p = t.accuracy(alloc[k]).unwrap();
            let se = (p * (1.0 - p) / s.per_type_counts[k] as f64).sqrt();
            assert!((s.per_type_accuracy[k] - p).abs() <= 3.0 * se.max(1e-12));
        }
    }

    #[test]
    fn near_empty_queue() {
        let w = reference_workload().with_lambda(1e-6).unwrap();
        let s = simulate(&w, &[0.0; 6], &cfg(10_000, 4)).unwrap();
        assert!(s.mean_wait < 1e-3);
    }

    #[test]
    fn littles_law() {
        let w = reference_workload();
        let alloc = [300.0; 6];
        let s = simulate(&w, &alloc, &cfg(500_000, 5)).unwrap();
        let lhs = s.mean_in_system;
        let rhs = w.lambda() * s.mean_system;
        let se = (s.stderr_in_system.powi(2) + (w.lambda() * s.stderr_system).powi(2)).sqrt();
        assert!((lhs - rhs).abs() <= 3.0 * se, "L = {lhs}, λW = {rhs}, se = {se}");
    }

    #[test]
    fn comparison_flags() {
        let w = reference_workload();
        let alloc = [500.0; 6];
        let s = simulate(&w, &alloc, &cfg(200_000, 6)).unwrap();
        let c = compare_to_pk(&s, &w, &alloc).unwrap();
        assert!(!c.high_variance);
        assert!((c.rho - 0.643_071_666_7).abs() < 1e-9);

        let hot = [w.uniform_budget_for_rho(0.98); 6];
        let s_hot = simulate(&w, &hot, &cfg(200_000, 6)).unwrap();
        let c_hot = compare_to_pk(&s_hot, &w, &hot).unwrap();
        assert!(c_hot.high_variance);
        assert!(s_hot.stderr_wait > 10.0 * s.stderr_wait);
    }

    #[test]
    fn unstable_runs_are_flagged() {
        let w = reference_workload();
        let s = simulate(&w, &[1000.0; 6], &cfg(5_000, 8)).unwrap();
        assert!(s.nonstationary);
        assert!(compare_to_pk(&s, &w, &[1000.0; 6]).is_err());
    }

    #[test]
    fn empirical_utility_tightens_with_length() {
        let w = reference_workload();
        let alloc = [0.0, 340.0, 0.0, 0.0, 346.0, 30.0];
        let j = objective_value(&w, &alloc).unwrap();
        // Average |error| over a small seed family at each length.
        let err = |n: usize| {
            (0..8)
                .map(|seed| (simulate(&w, &alloc, &cfg(n, 100 + seed)).unwrap().empirical_j - j).abs())
                .sum::<f64>()
                / 8.0
        };
        let (e4, e5, e6) = (err(10_000), err(100_000), err(1_000_000));
        assert!(e4 > e5 && e5 > e6, "{e4} {e5} {e6}");
    }
}
