//! `tokenq`: optimize, simulate, sweep, fit and bound reasoning-token budgets.
//!
//! Results go to stdout as JSON (CSV for `sweep`) unless `--out` is given.
//! Exit status is 0 on success, 1 on bad input, 2 when a solver fails to
//! converge.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tokenq::fit::{fit_accuracy, fit_latency, MeasurementSeries};
use tokenq::integer::{exhaustive_floor_ceil, round_result, rounding_lower_bound};
use tokenq::sim::simulate_with_records;
use tokenq::sweep::{sweep, sweep_grid};
use tokenq::{
    compare_to_pk, queue_metrics, solve_fixed_point, solve_pga, Error, FixedPointOptions, PgaOptions,
    SimConfig, SolveReport, TaskType, Workload,
};

#[derive(Parser)]
#[command(
    name = "tokenq",
    version,
    about = "Reasoning-token budgets for an M/G/1 LLM server"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Workload JSON file.
    #[arg(long, global = true, value_name = "PATH")]
    workload: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Solver stopping tolerance (solver default when omitted).
    #[arg(long, global = true, value_parser = positive)]
    tol: Option<f64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Pga)]
    method: MethodArg,
    /// Uniform box for projected gradient ascent.
    #[arg(long, global = true, value_parser = positive)]
    box_cap: Option<f64>,
    /// Fixed projected-gradient step.
    #[arg(long, global = true, value_parser = positive)]
    eta: Option<f64>,
    #[arg(long, global = true, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    n_arrivals: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    FixedPoint,
    Pga,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the continuous optimum and both integer roundings.
    Optimize,
    /// Simulate the queue at an allocation (the optimum by default).
    Simulate {
        #[command(flatten)]
        alloc: AllocArg,
        /// Add the closed-form comparison block.
        #[arg(long)]
        compare: bool,
        /// Per-query CSV trace, warmup included.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Vary one task's budget with the others held fixed.
    Sweep {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long, default_value_t = 1000.0)]
        end: f64,
        #[arg(long, default_value_t = 10.0, value_parser = positive)]
        step: f64,
        /// Add a simulated utility column.
        #[arg(long)]
        simulate: bool,
        /// Fixed budgets for the other tasks (the optimum by default).
        #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
        base: Option<Vec<f64>>,
    },
    /// Fit curve parameters from a CSV with columns task,l,accuracy,latency.
    Fit {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1, value_parser = positive)]
        lambda: f64,
        #[arg(long, default_value_t = 30.0)]
        alpha: f64,
        #[arg(long, default_value_t = 32768.0)]
        l_max: f64,
    },
    /// Utility bracket around integer rounding.
    Bounds {
        #[command(flatten)]
        alloc: AllocArg,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct AllocArg {
    /// Explicit allocation, one budget per task.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
    alloc: Option<Vec<f64>>,
    /// Same budget for every task.
    #[arg(long, value_name = "L")]
    uniform: Option<f64>,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive and finite, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

enum Failure {
    Input(String),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged) => ExitCode::from(2),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Optimize => optimize(c),
        Command::Simulate {
            alloc,
            compare,
            trace,
        } => simulate_cmd(c, alloc, *compare, trace.as_deref()),
        Command::Sweep {
            task,
            start,
            end,
            step,
            simulate,
            base,
        } => sweep_cmd(c, task, *start, *end, *step, *simulate, base.as_deref()),
        Command::Fit {
            data,
            lambda,
            alpha,
            l_max,
        } => fit_cmd(c, data, *lambda, *alpha, *l_max),
        Command::Bounds { alloc } => bounds_cmd(c, alloc),
    }
}

fn load_workload(c: &Common) -> CliResult<Workload> {
    let path = c
        .workload
        .as_ref()
        .ok_or_else(|| Failure::Input("--workload PATH is required for this command".into()))?;
    Workload::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn output(c: &Common) -> CliResult<Box<dyn Write>> {
    Ok(match &c.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_json<T: Serialize>(c: &Common, value: &T) -> CliResult<()> {
    let mut out = output(c)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn solve(c: &Common, w: &Workload) -> CliResult<SolveReport> {
    let init = vec![0.0; w.len()];
    let max_iter = c.max_iter.map(|m| m as usize);
    let report = match c.method {
        MethodArg::Pga => {
            let d = PgaOptions::default();
            solve_pga(
                w,
                &init,
                PgaOptions {
                    eta: c.eta,
                    box_cap: c.box_cap,
                    tol: c.tol.unwrap_or(d.tol),
                    max_iter: max_iter.unwrap_or(d.max_iter),
                    record_trace: false,
                },
            )?
        }
        MethodArg::FixedPoint => {
            if c.eta.is_some() || c.box_cap.is_some() {
                eprintln!("warning: --eta and --box-cap only apply to --method pga");
            }
            let d = FixedPointOptions::default();
            solve_fixed_point(
                w,
                &init,
                FixedPointOptions {
                    tol: c.tol.unwrap_or(d.tol),
                    max_iter: max_iter.unwrap_or(d.max_iter),
                    record_trace: false,
                },
            )?
        }
    };
    Ok(report)
}

/// Solves and insists on convergence; used where the optimum is only an
/// operating point for something else.
fn solved_optimum(c: &Common, w: &Workload) -> CliResult<Vec<f64>> {
    let r = solve(c, w)?;
    if !r.converged {
        eprintln!(
            "error: {} did not converge in {} iterations (residual {:e})",
            r.method, r.iterations, r.residual
        );
        return Err(Failure::NotConverged);
    }
    Ok(r.alloc.into_inner())
}

/// The requested allocation, and whether it is the solved optimum.
fn resolve_alloc(c: &Common, w: &Workload, arg: &AllocArg) -> CliResult<(Vec<f64>, bool)> {
    let picked = match (&arg.alloc, arg.uniform) {
        (Some(v), _) => (v.clone(), false),
        (None, Some(l)) => (vec![l; w.len()], false),
        (None, None) => (solved_optimum(c, w)?, true),
    };
    w.check_allocation(&picked.0)?;
    Ok(picked)
}

fn optimize(c: &Common) -> CliResult<()> {
    let w = load_workload(c)?;
    let report = solve(c, &w)?;
    let metrics = queue_metrics(&w, &report.alloc)?;
    let round = round_result(&w, &report.alloc)?;
    let exhaustive = exhaustive_floor_ceil(&w, &report.alloc);
    let integer = match &exhaustive {
        Ok(ex) => json!({ "round": round, "exhaustive": ex }),
        Err(e) => json!({ "round": round, "exhaustive": null, "exhaustive_error": e.to_string() }),
    };
    let names: Vec<&str> = w.tasks().iter().map(|t| t.name.as_str()).collect();
    emit_json(
        c,
        &json!({
            "tasks": names,
            "solver": report,
            "metrics": metrics,
            "integer": integer,
        }),
    )?;
    if report.converged {
        Ok(())
    } else {
        eprintln!(
            "error: {} stopped after {} iterations with residual {:e} > tol {:e}",
            report.method, report.iterations, report.residual, report.tol
        );
        Err(Failure::NotConverged)
    }
}

fn simulate_cmd(c: &Common, arg: &AllocArg, compare: bool, trace: Option<&Path>) -> CliResult<()> {
    let w = load_workload(c)?;
    let (alloc, _) = resolve_alloc(c, &w, arg)?;
    let cfg = SimConfig {
        n_arrivals: c.n_arrivals as usize,
        seed: c.seed,
        ..Default::default()
    };
    let (stats, records) = simulate_with_records(&w, &alloc, &cfg)?;
    if let Some(path) = trace {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["arrival_time", "type", "wait", "system_time", "correct"])?;
        for r in &records {
            wtr.write_record([
                r.arrival_time.to_string(),
                w.tasks()[r.task].name.clone(),
                r.wait.to_string(),
                r.system_time.to_string(),
                u8::from(r.correct).to_string(),
            ])?;
        }
        wtr.flush()?;
    }
    let mut doc = json!({ "alloc": alloc, "config": cfg, "stats": stats });
    if compare {
        doc["comparison"] = match compare_to_pk(&stats, &w, &alloc) {
            Ok(cmp) => serde_json::to_value(cmp).map_err(Error::from)?,
            Err(e) => json!({ "unavailable": e.to_string() }),
        };
    }
    emit_json(c, &doc)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_cmd(
    c: &Common,
    task: &str,
    start: f64,
    end: f64,
    step: f64,
    with_sim: bool,
    base: Option<&[f64]>,
) -> CliResult<()> {
    let w = load_workload(c)?;
    let k = w.task_index(task).ok_or_else(|| {
        let names: Vec<&str> = w.tasks().iter().map(|t| t.name.as_str()).collect();
        Failure::Input(format!(
            "unknown task {task:?}; valid names: {}",
            names.join(", ")
        ))
    })?;
    let grid = sweep_grid(start, end, step)?;
    let base = match base {
        Some(b) => b.to_vec(),
        None => solved_optimum(c, &w)?,
    };
    let sim_cfg = SimConfig {
        n_arrivals: c.n_arrivals as usize,
        seed: c.seed,
        ..Default::default()
    };
    let (rows, summary) = sweep(&w, &base, k, &grid, with_sim.then_some(&sim_cfg))?;

    let mut out = output(c)?;
    if with_sim {
        writeln!(
            out,
            "l_value,J_analytic,J_lower_bound,J_simulated,J_simulated_stderr"
        )?;
    } else {
        writeln!(out, "l_value,J_analytic,J_lower_bound")?;
    }
    for r in &rows {
        write!(out, "{},{},{}", r.l, fmt_opt(r.j_analytic), fmt_opt(r.j_lower))?;
        if with_sim {
            write!(
                out,
                ",{},{}",
                fmt_opt(r.j_simulated),
                fmt_opt(r.j_simulated_stderr)
            )?;
        }
        writeln!(out)?;
    }
    let footer = json!({ "summary": summary, "base": base });
    writeln!(out, "# {}", serde_json::to_string(&footer).map_err(Error::from)?)?;
    out.flush()?;
    Ok(())
}

const FIT_COLUMNS: [&str; 4] = ["task", "l", "accuracy", "latency"];

fn fit_cmd(c: &Common, data: &Path, lambda: f64, alpha: f64, l_max: f64) -> CliResult<()> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(data)?;
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 4];
    for (slot, col) in idx.iter_mut().zip(FIT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Failure::Input(format!("{}: missing column {col:?}", data.display())))?;
    }

    // Tasks keep their order of first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut series: HashMap<String, (MeasurementSeries, MeasurementSeries)> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> CliResult<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Failure::Input(format!(
                    "{}: row {}: column {:?} is not a number: {:?}",
                    data.display(),
                    row + 2,
                    FIT_COLUMNS[i],
                    field(i)
                ))
            })
        };
        let name = field(0).to_string();
        let (l, acc, lat) = (num(1)?, num(2)?, num(3)?);
        let entry = series.entry(name.clone()).or_insert_with(|| {
            order.push(name);
            Default::default()
        });
        entry.0.push(l, acc);
        entry.1.push(l, lat);
    }
    if order.is_empty() {
        return Err(Failure::Input(format!("{}: no data rows", data.display())));
    }

    let pi = 1.0 / order.len() as f64;
    let mut tasks = Vec::with_capacity(order.len());
    for name in &order {
        let (acc, lat) = &series[name];
        let fa = fit_accuracy(acc).map_err(|e| Failure::Input(format!("task {name}: {e}")))?;
        let fl = fit_latency(lat).map_err(|e| Failure::Input(format!("task {name}: {e}")))?;
        for warn in fa.warnings.iter().chain(&fl.warnings) {
            eprintln!("warning: task {name}: {warn}");
        }
        eprintln!(
            "task {name}: accuracy rmse {:.3e} over {} points, latency rmse {:.3e} over {} points",
            fa.rmse, fa.n_points, fl.rmse, fl.n_points
        );
        tasks.push(TaskType {
            name: name.clone(),
            pi,
            a: fa.params.a,
            b: fa.params.b,
            d: fa.params.d,
            t0: fl.params.t0,
            c: fl.params.c,
        });
    }
    let w = Workload::new(lambda, alpha, l_max, tasks)?;
    emit_json(c, &w)
}

fn bounds_cmd(c: &Common, arg: &AllocArg) -> CliResult<()> {
    let w = load_workload(c)?;
    let (alloc, at_optimum) = resolve_alloc(c, &w, arg)?;
    let mut doc = json!({
        "alloc": alloc,
        "at_optimum": at_optimum,
        "j_cont": null,
        "j_int_round": null,
        "j_int_exhaustive": null,
        "j_lower": null,
    });
    let mut explanation = Vec::new();

    match queue_metrics(&w, &alloc) {
        Ok(m) => {
            doc["j_cont"] = json!(m.j);
            let round = round_result(&w, &alloc)?;
            doc["j_int_round"] = json!(round.j_int);
            doc["alloc_int_round"] = json!(round.alloc_int);
            match exhaustive_floor_ceil(&w, &alloc) {
                Ok(ex) => {
                    doc["j_int_exhaustive"] = json!(ex.j_int);
                    doc["alloc_int_exhaustive"] = json!(ex.alloc_int);
                }
                Err(e) => explanation.push(e.to_string()),
            }
        }
        Err(e) => explanation.push(format!("continuous utility undefined: {e}")),
    }
    match rounding_lower_bound(&w, &alloc) {
        Ok(lb) => doc["j_lower"] = json!(lb),
        Err(e) => explanation.push(e.to_string()),
    }

    // j_lower <= j_int_round <= j_int_exhaustive always; the last link
    // up to j_cont needs the allocation to be the continuous maximizer.
    let val = |k: &str| doc[k].as_f64();
    let mut chain: Vec<f64> = ["j_lower", "j_int_round", "j_int_exhaustive"]
        .into_iter()
        .filter_map(val)
        .collect();
    if at_optimum {
        chain.extend(val("j_cont"));
    } else {
        explanation.push("allocation is not the solved optimum, so J(l_int) <= J(l) is not implied".into());
    }
    let holds = chain.windows(2).all(|p| p[0] <= p[1] + 1e-12);
    doc["bracket_holds"] = json!(holds);
    if !explanation.is_empty() {
        doc["explanation"] = json!(explanation.join("; "));
    }
    emit_json(c, &doc)?;
    if holds {
        Ok(())
    } else {
        Err(Failure::Input("utility bracket violated".into()))
    }
}
