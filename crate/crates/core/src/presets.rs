//! Reference operating point: six reasoning benchmarks served by one
//! model at `λ = 0.1`, `α = 30`, uniform mixture, 32768-token cap.

use crate::workload::Workload;

pub const REFERENCE_JSON: &str = include_str!("../data/reference.json");

/// Task names in workload order.
pub const REFERENCE_NAMES: [&str; 6] = ["AIME", "GSM8K", "GPQA", "CRUXEval", "BBH", "ARC-Challenge"];

/// Reported optimal budgets for the reference workload, workload order.
pub const REFERENCE_REPORTED_OPTIMUM: [f64; 6] = [0.0, 340.5, 0.0, 0.0, 345.0, 30.1];

pub fn reference_workload() -> Workload {
    Workload::from_json(REFERENCE_JSON).expect("bundled workload is valid")
}
