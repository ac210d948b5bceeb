//! Receding-horizon simulation under bounded disturbances and run metrics.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cis::steer_into;
use crate::design::{CisCache, ControllerDesign, GridSettings, ProblemSetup, TerminalDesign};
use crate::dynamics::SystemModel;
use crate::error::{Result, ZmpcError};
use crate::ocp::{solve_zmpc, SolveStatus, Variant, ZmpcConfig};
use crate::sets::{zone_cost, BoxSet, XdMaxEstimate, ZoneCostSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    UniformIid,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceGenerator {
    pub bounds: BoxSet,
    pub seed: u64,
    pub mode: DisturbanceMode,
}

impl DisturbanceGenerator {
    pub fn uniform(bounds: BoxSet, seed: u64) -> Self {
        Self {
            bounds,
            seed,
            mode: DisturbanceMode::UniformIid,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            bounds: BoxSet::point(&vec![0.0; dim]).expect("zero box"),
            seed: 0,
            mode: DisturbanceMode::Zero,
        }
    }

    pub fn sequence(&self, steps: usize) -> Vec<Vec<f64>> {
        let n = self.bounds.dim();
        match self.mode {
            DisturbanceMode::Zero => vec![vec![0.0; n]; steps],
            DisturbanceMode::UniformIid => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..steps)
                    .map(|_| {
                        (0..n)
                            .map(|i| {
                                let (lo, hi) = (self.bounds.lb()[i], self.bounds.ub()[i]);
                                (lo + (hi - lo) * rng.random::<f64>()).clamp(lo, hi)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub zone_cost_actual: f64,
    pub zone_cost_modified: f64,
    pub econ_cost: f64,
    pub value: f64,
    pub status: SolveStatus,
    /// Controller's nominal one-step prediction; absent when read back from CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_next: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub rows: Vec<StepRecord>,
    pub final_state: Vec<f64>,
}

impl ClosedLoopRecord {
    /// Plant successor of each row, ending with the final state.
    pub fn successor(&self, n: usize) -> &[f64] {
        self.rows.get(n + 1).map_or(&self.final_state, |r| &r.state)
    }

    /// Largest Euclidean gap between the plant successor and the controller prediction.
    pub fn max_prediction_deviation(&self) -> f64 {
        (0..self.rows.len())
            .filter_map(|n| {
                let p = self.rows[n].predicted_next.as_ref()?;
                Some(
                    p.iter()
                        .zip(self.successor(n))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                )
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub steps: usize,
    /// Zone costs are also logged against this box.
    pub actual_target: BoxSet,
    /// Consecutive infeasible solves tolerated before the run aborts.
    pub failure_budget: usize,
}

/// Warm start for the next step: drop the applied input and append one that
/// steers the last prediction into the terminal set.
fn shifted_warm_start(model: &SystemModel, config: &ZmpcConfig, inputs: &[Vec<f64>], states: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut ws: Vec<Vec<f64>> = inputs[1..].to_vec();
    let last = inputs.last().cloned().unwrap_or_default();
    let tail = match (&config.terminal_set, states.last()) {
        (Some(t), Some(xn)) if states.len() == config.horizon + 1 => {
            steer_into(model, xn, t, &config.input_bounds, 21, 20).map_or(last, |s| s.input)
        }
        _ => last,
    };
    ws.push(tail);
    ws
}

pub fn simulate(
    model: &SystemModel,
    config: &ZmpcConfig,
    x0: &[f64],
    settings: &SimulationSettings,
    disturbance: &DisturbanceGenerator,
) -> Result<ClosedLoopRecord> {
    if settings.steps == 0 {
        return Err(ZmpcError::InvalidConfig("steps must be positive".into()));
    }
    if disturbance.bounds.dim() != model.disturbance_dim() {
        return Err(ZmpcError::DimensionMismatch("disturbance box does not match the model".into()));
    }
    let actual_spec = ZoneCostSpec::new(config.zone_cost.c1, config.zone_cost.c2, settings.actual_target.clone())?;
    let dt = model.sample_time().unwrap_or(1.0);
    let ws = disturbance.sequence(settings.steps);
    let mut x = x0.to_vec();
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut failures = 0;
    let mut rows = Vec::with_capacity(settings.steps);
    for (n, w) in ws.into_iter().enumerate() {
        let sol = solve_zmpc(&x, model, config, warm.as_deref())?;
        if sol.status == SolveStatus::Infeasible {
            failures += 1;
            if failures > settings.failure_budget {
                return Err(ZmpcError::AbortedRun { step: n, failures });
            }
        } else {
            failures = 0;
        }
        let u = sol.inputs[0].clone();
        let next = model.step(&x, &u, &w)?;
        log::debug!(
            "step {n}: x {:?} u {:?} status {} V {:.4e} iters {} rounds {} viol {:.2e}",
            x,
            u,
            sol.status.name(),
            sol.objective_value,
            sol.diagnostics.iterations,
            sol.diagnostics.penalty_rounds,
            sol.max_constraint_violation
        );
        rows.push(StepRecord {
            step: n,
            time: n as f64 * dt,
            zone_cost_actual: zone_cost(&x, &actual_spec),
            zone_cost_modified: zone_cost(&x, &config.zone_cost),
            econ_cost: config.economic.eval(&x, &u),
            value: sol.objective_value,
            status: sol.status,
            predicted_next: sol.predicted_states.get(1).cloned(),
            state: x,
            input: u,
            disturbance: w,
        });
        warm = Some(shifted_warm_start(model, config, &sol.inputs, &sol.predicted_states));
        x = next;
    }
    Ok(ClosedLoopRecord { rows, final_state: x })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accumulated_zone_cost_actual: f64,
    pub accumulated_economic_cost: f64,
    pub first_entry_step: Option<usize>,
    pub violations_after_entry: usize,
    pub avg_violation_magnitude: Option<f64>,
    pub state_constraint_violations: usize,
}

pub fn compute_metrics(record: &ClosedLoopRecord, actual_target: &BoxSet, state_bounds: &BoxSet) -> RunMetrics {
    let mut first = None;
    let mut count = 0;
    let mut total = 0.0;
    let mut state_viol = 0;
    for r in &record.rows {
        let res = actual_target.residual_l1(&r.state);
        match first {
            None if res == 0.0 => first = Some(r.step),
            Some(_) if res > 0.0 => {
                count += 1;
                total += res;
            }
            _ => {}
        }
        if state_bounds.residual_l1(&r.state) > 0.0 {
            state_viol += 1;
        }
    }
    RunMetrics {
        accumulated_zone_cost_actual: record.rows.iter().map(|r| r.zone_cost_actual).sum(),
        accumulated_economic_cost: record.rows.iter().map(|r| r.econ_cost).sum(),
        first_entry_step: first,
        violations_after_entry: count,
        avg_violation_magnitude: (count > 0).then(|| total / count as f64),
        state_constraint_violations: state_viol,
    }
}

/// Builds the controller for `variant` and simulates it.
pub fn run_variant(
    model: &SystemModel,
    setup: &ProblemSetup,
    design: &ControllerDesign,
    variant: Variant,
    x0: &[f64],
    steps: usize,
    disturbance: &DisturbanceGenerator,
) -> Result<ClosedLoopRecord> {
    let config = design.config(setup, variant)?;
    let settings = SimulationSettings {
        steps,
        actual_target: setup.target.clone(),
        failure_budget: 3,
    };
    simulate(model, &config, x0, &settings, disturbance)
}

/// Aggregate over seeds for one risk factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub modified_target: Option<BoxSet>,
    pub terminal_set: Option<BoxSet>,
    /// Set when the row could not be evaluated, e.g. an empty modified target.
    pub error: Option<String>,
    pub runs: usize,
    pub aborted_runs: usize,
    pub runs_entered: usize,
    pub mean_first_entry_step: Option<f64>,
    pub mean_violations_after_entry: f64,
    pub mean_avg_violation_magnitude: Option<f64>,
    pub mean_accumulated_zone_cost_actual: f64,
    pub mean_accumulated_economic_cost: f64,
    pub mean_state_constraint_violations: f64,
}

impl SweepRow {
    fn failed(gamma: f64, err: &ZmpcError) -> Self {
        Self {
            gamma,
            modified_target: None,
            terminal_set: None,
            error: Some(err.to_string()),
            runs: 0,
            aborted_runs: 0,
            runs_entered: 0,
            mean_first_entry_step: None,
            mean_violations_after_entry: f64::NAN,
            mean_avg_violation_magnitude: None,
            mean_accumulated_zone_cost_actual: f64::NAN,
            mean_accumulated_economic_cost: f64::NAN,
            mean_state_constraint_violations: f64::NAN,
        }
    }

    pub fn aggregate(gamma: f64, design: &ControllerDesign, metrics: &[RunMetrics], aborted: usize) -> Self {
        let k = metrics.len() as f64;
        let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
            if metrics.is_empty() {
                f64::NAN
            } else {
                metrics.iter().map(f).sum::<f64>() / k
            }
        };
        let opt_mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let entries: Vec<f64> = metrics.iter().filter_map(|m| m.first_entry_step.map(|s| s as f64)).collect();
        Self {
            gamma,
            modified_target: Some(design.modified_target.clone()),
            terminal_set: Some(design.modified.terminal.bounds.clone()),
            error: None,
            runs: metrics.len(),
            aborted_runs: aborted,
            runs_entered: entries.len(),
            mean_first_entry_step: opt_mean(entries),
            mean_violations_after_entry: mean(&|m| m.violations_after_entry as f64),
            mean_avg_violation_magnitude: opt_mean(metrics.iter().filter_map(|m| m.avg_violation_magnitude).collect()),
            mean_accumulated_zone_cost_actual: mean(&|m| m.accumulated_zone_cost_actual),
            mean_accumulated_economic_cost: mean(&|m| m.accumulated_economic_cost),
            mean_state_constraint_violations: mean(&|m| m.state_constraint_violations as f64),
        }
    }
}

/// Runs `variant` for every risk factor and seed. The actual-target design is
/// shared; each risk factor gets its own modified set and terminal box.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep(
    model: &SystemModel,
    setup: &ProblemSetup,
    grid: &GridSettings,
    actual: &TerminalDesign,
    xd: &XdMaxEstimate,
    variant: Variant,
    gammas: &[f64],
    x0: &[f64],
    steps: usize,
    seeds: &[u64],
    cache: Option<&CisCache>,
) -> Vec<SweepRow> {
    gammas
        .iter()
        .map(|&gamma| {
            let design = match ControllerDesign::with_actual(model, setup, grid, actual.clone(), xd.clone(), gamma, cache) {
                Ok(d) => d,
                Err(e) => return SweepRow::failed(gamma, &e),
            };
            let outcomes: Vec<Result<RunMetrics>> = seeds
                .par_iter()
                .map(|&seed| {
                    let gen = DisturbanceGenerator::uniform(setup.disturbance_bounds.clone(), seed);
                    let rec = run_variant(model, setup, &design, variant, x0, steps, &gen)?;
                    Ok(compute_metrics(&rec, &setup.target, &setup.state_bounds))
                })
                .collect();
            let mut metrics = Vec::new();
            let mut aborted = 0;
            for o in outcomes {
                match o {
                    Ok(m) => metrics.push(m),
                    Err(ZmpcError::AbortedRun { .. }) => aborted += 1,
                    Err(e) => return SweepRow::failed(gamma, &e),
                }
            }
            SweepRow::aggregate(gamma, &design, &metrics, aborted)
        })
        .collect()
}

fn column_names(nx: usize, nu: usize, nw: usize) -> (Vec<String>, Vec<String>, Vec<String>) {
    if (nx, nu, nw) == (2, 1, 2) {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        (s(&["C_A", "T"]), s(&["T_c"]), s(&["w_CAf", "w_Tf"]))
    } else {
        let g = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        (g("x", nx), g("u", nu), g("w", nw))
    }
}

pub fn write_trajectory_csv<W: Write>(record: &ClosedLoopRecord, out: W) -> Result<()> {
    let first = record
        .rows
        .first()
        .ok_or_else(|| ZmpcError::InvalidConfig("empty record".into()))?;
    let (xs, us, ws) = column_names(first.state.len(), first.input.len(), first.disturbance.len());
    let mut wr = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "time_min".to_string()];
    header.extend(xs);
    header.extend(us);
    header.extend(ws);
    header.extend(
        ["zone_cost_actual", "zone_cost_modified", "econ_cost", "V_N0", "solver_status"].map(String::from),
    );
    let csv_err = |e: csv::Error| ZmpcError::Io(e.to_string());
    wr.write_record(&header).map_err(csv_err)?;
    for r in &record.rows {
        let mut fields = vec![r.step.to_string(), r.time.to_string()];
        fields.extend(r.state.iter().chain(&r.input).chain(&r.disturbance).map(f64::to_string));
        fields.extend([r.zone_cost_actual, r.zone_cost_modified, r.econ_cost, r.value].map(|v| v.to_string()));
        fields.push(r.status.name().to_string());
        wr.write_record(&fields).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads rows back from [`write_trajectory_csv`]; the final state is not
/// stored there and is taken from the last row.
pub fn read_trajectory_csv<R: Read>(input: R, nx: usize, nu: usize, nw: usize) -> Result<ClosedLoopRecord> {
    let mut rd = csv::Reader::from_reader(input);
    let fmt = |m: String| ZmpcError::Format(m);
    let width = 2 + nx + nu + nw + 5;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        if rec.len() != width {
            return Err(fmt(format!("expected {width} columns, found {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| fmt(format!("column {i}: {e}")));
        let vec = |a: usize, n: usize| (a..a + n).map(num).collect::<Result<Vec<f64>>>();
        let k = 2 + nx + nu + nw;
        let status = match &rec[k + 4] {
            "optimal" => SolveStatus::Optimal,
            "feasible_suboptimal" => SolveStatus::FeasibleSuboptimal,
            "infeasible" => SolveStatus::Infeasible,
            other => return Err(fmt(format!("unknown solver status '{other}'"))),
        };
        rows.push(StepRecord {
            step: rec[0].parse().map_err(|e| fmt(format!("step: {e}")))?,
            time: num(1)?,
            state: vec(2, nx)?,
            input: vec(2 + nx, nu)?,
            disturbance: vec(2 + nx + nu, nw)?,
            zone_cost_actual: num(k)?,
            zone_cost_modified: num(k + 1)?,
            econ_cost: num(k + 2)?,
            value: num(k + 3)?,
            status,
            predicted_next: None,
        });
    }
    let final_state = rows.last().map(|r| r.state.clone()).unwrap_or_default();
    Ok(ClosedLoopRecord { rows, final_state })
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| ZmpcError::Io(e.to_string());
    wr.write_record([
        "gamma",
        "modified_lb",
        "modified_ub",
        "terminal_lb",
        "terminal_ub",
        "runs",
        "aborted_runs",
        "runs_entered",
        "mean_first_entry_step",
        "mean_violations_after_entry",
        "mean_avg_violation_magnitude",
        "mean_accumulated_zone_cost_actual",
        "mean_accumulated_economic_cost",
        "mean_state_constraint_violations",
        "error",
    ])
    .map_err(csv_err)?;
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let (mlb, mub) = r
            .modified_target
            .as_ref()
            .map_or((String::new(), String::new()), |b| (join(b.lb()), join(b.ub())));
        let (tlb, tub) = r
            .terminal_set
            .as_ref()
            .map_or((String::new(), String::new()), |b| (join(b.lb()), join(b.ub())));
        wr.write_record([
            r.gamma.to_string(),
            mlb,
            mub,
            tlb,
            tub,
            r.runs.to_string(),
            r.aborted_runs.to_string(),
            r.runs_entered.to_string(),
            opt(r.mean_first_entry_step),
            r.mean_violations_after_entry.to_string(),
            opt(r.mean_avg_violation_magnitude),
            r.mean_accumulated_zone_cost_actual.to_string(),
            r.mean_accumulated_economic_cost.to_string(),
            r.mean_state_constraint_violations.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(lb: &[f64], ub: &[f64]) -> BoxSet {
        BoxSet::new(lb.to_vec(), ub.to_vec()).unwrap()
    }

    fn row(step: usize, x: f64, zc: f64) -> StepRecord {
        StepRecord {
            step,
            time: step as f64,
            state: vec![x],
            input: vec![0.0],
            disturbance: vec![0.0],
            zone_cost_actual: zc,
            zone_cost_modified: zc,
            econ_cost: 1.0,
            value: 0.0,
            status: SolveStatus::Optimal,
            predicted_next: None,
        }
    }

    #[test]
    fn hand_built_violation_count() {
        // Steps 1..=5; entry at 1, steps 3 and 5 outside by 0.2 and 0.4.
        let xs = [0.5, 0.5, 1.2, 0.9, -0.4];
        let rec = ClosedLoopRecord {
            rows: xs.iter().enumerate().map(|(i, &x)| row(i + 1, x, 0.0)).collect(),
            final_state: vec![0.5],
        };
        let m = compute_metrics(&rec, &bx(&[0.0], &[1.0]), &bx(&[-5.0], &[5.0]));
        assert_eq!(m.first_entry_step, Some(1));
        assert_eq!(m.violations_after_entry, 2);
        assert!((m.avg_violation_magnitude.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(m.state_constraint_violations, 0);
        assert_eq!(m.accumulated_economic_cost, 5.0);
    }

    #[test]
    fn inside_trajectory_has_no_violations() {
        let rec = ClosedLoopRecord {
            rows: (0..4).map(|i| row(i, 0.5, 0.0)).collect(),
            final_state: vec![0.5],
        };
        let m = compute_metrics(&rec, &bx(&[0.0], &[1.0]), &bx(&[0.0], &[1.0]));
        assert_eq!(m.violations_after_entry, 0);
        assert_eq!(m.avg_violation_magnitude, None);
        assert_eq!(m.accumulated_zone_cost_actual, 0.0);
        assert_eq!(m.first_entry_step, Some(0));
    }

    #[test]
    fn pre_entry_excursions_are_not_violations() {
        let xs = [2.0, 1.5, 0.5, 0.5];
        let rec = ClosedLoopRecord {
            rows: xs.iter().enumerate().map(|(i, &x)| row(i, x, 0.0)).collect(),
            final_state: vec![0.5],
        };
        let m = compute_metrics(&rec, &bx(&[0.0], &[1.0]), &bx(&[0.0], &[1.8]));
        assert_eq!(m.first_entry_step, Some(2));
        assert_eq!(m.violations_after_entry, 0);
        assert_eq!(m.state_constraint_violations, 1);
    }

    #[test]
    fn disturbances_are_bounded_and_reproducible() {
        let w = bx(&[-0.1, -2.0], &[0.1, 2.0]);
        let g = DisturbanceGenerator::uniform(w.clone(), 7);
        let a = g.sequence(500);
        assert_eq!(a, g.sequence(500));
        assert!(a.iter().all(|v| w.contains(v)));
        assert_ne!(a, DisturbanceGenerator::uniform(w, 8).sequence(500));
        assert!(DisturbanceGenerator::zero(2).sequence(3).iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn csv_round_trip_preserves_metrics() {
        let mut rec = ClosedLoopRecord {
            rows: (0..3).map(|i| row(i, 0.1 * i as f64 + 1e-17, 0.3)).collect(),
            final_state: vec![0.2],
        };
        for r in &mut rec.rows {
            r.state = vec![r.state[0], 350.0 + 1.0 / 3.0];
            r.disturbance = vec![0.01, -1.7];
        }
        let mut buf = Vec::new();
        write_trajectory_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,time_min,C_A,T,T_c,w_CAf,w_Tf,zone_cost_actual"));
        let back = read_trajectory_csv(&buf[..], 2, 1, 2).unwrap();
        assert_eq!(back.rows, rec.rows);
        let t = bx(&[0.0, 348.0], &[1.0, 352.0]);
        assert_eq!(compute_metrics(&back, &t, &t), compute_metrics(&rec, &t, &t));
    }
}
