//! Reasoning-token budgets for an LLM server treated as an M/G/1 FIFO queue.
//!
//! Each task type `k` gets a budget `ℓ_k`; service takes `t0_k + c_k ℓ_k`
//! seconds and succeeds with probability `A_k (1 - e^{-b_k ℓ_k}) + D_k`.
//! The utility `J(ℓ) = α Σ π_k p_k(ℓ_k) - E[T_sys]` is strictly concave on the
//! stability region; [`fixed_point`] and [`pga`] find its maximizer,
//! [`integer`] turns it into whole tokens, and [`sim`] checks the queueing
//! formulas by simulation.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod fixed_point;
pub mod integer;
pub mod lambert;
pub mod objective;
pub mod pga;
pub mod presets;
pub mod sim;
pub mod solve;
pub mod sweep;
pub mod workload;

pub use error::{Error, Result};
pub use fixed_point::{coefficients, contraction_bound, fp_update, solve_fixed_point, FixedPointOptions};
pub use integer::{exhaustive_floor_ceil, round_nearest, rounding_lower_bound, IntegerResult};
pub use lambert::lambert_w0;
pub use objective::{gradient, hessian, mean_wait, objective_value, queue_metrics, QueueMetrics};
pub use pga::{lipschitz_bound, solve_pga, PgaOptions};
pub use sim::{compare_to_pk, simulate, SimConfig, SimStats};
pub use solve::{Method, SolveReport};
pub use workload::{
    accuracy, service_moments, service_time, utilization, validate_workload, Allocation, TaskType, Workload,
    WorkloadSpec,
};
