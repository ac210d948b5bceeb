//! Finite-horizon zone-tracking optimal control problem.
//!
//! Single shooting over the `N * n_u` input vector. Inputs stay inside their
//! box by projection; state and terminal constraints enter through an exact
//! (L1) penalty whose weight grows until the violation drops below
//! `constraint_tolerance`. The inner solver is a projected BFGS with
//! central-difference gradients and an Armijo backtracking line search,
//! followed by a compass-search polish when the line search stalls at a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Result, ZmpcError};
use crate::sets::{zone_cost, BoxSet, ZoneCostSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Actual target, terminal set inside the actual target.
    Nominal,
    /// Modified target, terminal set inside the modified target.
    Proposed,
    /// Actual target, terminal set inside the modified target.
    OriginalZoneModifiedTerminal,
    /// Modified target, no terminal constraint.
    NoTerminal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Nominal,
        Variant::Proposed,
        Variant::OriginalZoneModifiedTerminal,
        Variant::NoTerminal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nominal => "nominal",
            Variant::Proposed => "proposed",
            Variant::OriginalZoneModifiedTerminal => "original-zone-modified-terminal",
            Variant::NoTerminal => "no-terminal",
        }
    }

    pub fn tracks_modified_target(self) -> bool {
        matches!(self, Variant::Proposed | Variant::NoTerminal)
    }
}

impl std::str::FromStr for Variant {
    type Err = ZmpcError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ZmpcError::InvalidConfig(format!("unknown controller variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Iteration cap of each inner quasi-Newton solve.
    pub max_iterations: usize,
    pub constraint_tolerance: f64,
    pub stationarity_tolerance: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub multistart_count: usize,
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            constraint_tolerance: 1e-6,
            stationarity_tolerance: 1e-6,
            penalty_initial: 1e5,
            penalty_growth: 10.0,
            penalty_max: 1e9,
            multistart_count: 4,
            seed: 0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.constraint_tolerance > 0.0
            && self.stationarity_tolerance > 0.0
            && self.penalty_initial > 0.0
            && self.penalty_growth > 1.0
            && self.penalty_max >= self.penalty_initial
            && self.multistart_count > 0;
        if !ok {
            return Err(ZmpcError::InvalidConfig(format!("invalid solver settings {self:?}")));
        }
        Ok(())
    }

    /// Upper bound on outer penalty rounds.
    pub fn max_penalty_rounds(&self) -> usize {
        let r = (self.penalty_max / self.penalty_initial).ln() / self.penalty_growth.ln();
        r.ceil().max(0.0) as usize + 1
    }
}

/// Linear economic stage cost `l_e(x, u) = a . x + b . u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicCost {
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
}

impl EconomicCost {
    /// Reactant concentration of the CSTR.
    pub fn cstr_concentration() -> Self {
        Self {
            state_weights: vec![1.0, 0.0],
            input_weights: vec![0.0],
        }
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let a: f64 = self.state_weights.iter().zip(x).map(|(w, v)| w * v).sum();
        let b: f64 = self.input_weights.iter().zip(u).map(|(w, v)| w * v).sum();
        a + b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZmpcConfig {
    pub horizon: usize,
    pub zone_cost: ZoneCostSpec,
    pub state_bounds: BoxSet,
    pub input_bounds: BoxSet,
    pub terminal_set: Option<BoxSet>,
    pub economic: EconomicCost,
    pub economic_weight: f64,
    pub variant: Variant,
    pub solver: SolverSettings,
}

impl ZmpcConfig {
    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.horizon == 0 {
            return Err(ZmpcError::InvalidConfig("horizon must be at least 1".into()));
        }
        self.zone_cost.validate()?;
        self.solver.validate()?;
        let nx = model.state_dim();
        if self.zone_cost.target.dim() != nx
            || self.state_bounds.dim() != nx
            || self.input_bounds.dim() != model.input_dim()
            || self.terminal_set.as_ref().is_some_and(|t| t.dim() != nx)
            || self.economic.state_weights.len() != nx
            || self.economic.input_weights.len() != model.input_dim()
        {
            return Err(ZmpcError::DimensionMismatch(
                "controller sets and weights must match the model".into(),
            ));
        }
        if !(self.economic_weight >= 0.0) {
            return Err(ZmpcError::InvalidConfig("economic_weight must be non-negative".into()));
        }
        if let Some(t) = &self.terminal_set {
            if !t.is_subset_of(&self.state_bounds) {
                return Err(ZmpcError::InvalidConfig("terminal set leaves the state bounds".into()));
            }
            if self.variant == Variant::Proposed && !t.is_subset_of(&self.zone_cost.target) {
                return Err(ZmpcError::InvalidConfig(
                    "terminal set must lie inside the tracked target".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Zone cost plus weighted economic cost.
pub fn stage_cost(x: &[f64], u: &[f64], config: &ZmpcConfig) -> f64 {
    let z = zone_cost(x, &config.zone_cost);
    if config.economic_weight == 0.0 {
        z
    } else {
        z + config.economic_weight * config.economic.eval(x, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

impl SolveStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible_suboptimal",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub starts: usize,
    pub iterations: usize,
    pub penalty_rounds: usize,
    pub objective_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub inputs: Vec<Vec<f64>>,
    pub predicted_states: Vec<Vec<f64>>,
    pub objective_value: f64,
    pub max_constraint_violation: f64,
    pub status: SolveStatus,
    pub diagnostics: SolveDiagnostics,
}

/// Problem data shared by all evaluations of one solve.
struct Problem<'a> {
    model: &'a SystemModel,
    config: &'a ZmpcConfig,
    x0: &'a [f64],
    nu: usize,
    lo: Vec<f64>,
    span: Vec<f64>,
}

struct Rollout {
    states: Vec<Vec<f64>>,
    cost: f64,
    violation_sum: f64,
    violation_max: f64,
}

impl<'a> Problem<'a> {
    fn new(model: &'a SystemModel, config: &'a ZmpcConfig, x0: &'a [f64]) -> Self {
        let nu = model.input_dim();
        let n = nu * config.horizon;
        let lo: Vec<f64> = (0..n).map(|k| config.input_bounds.lb()[k % nu]).collect();
        let span: Vec<f64> = (0..n)
            .map(|k| config.input_bounds.ub()[k % nu] - config.input_bounds.lb()[k % nu])
            .collect();
        Self {
            model,
            config,
            x0,
            nu,
            lo,
            span,
        }
    }

    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn to_inputs(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lo.iter().zip(&self.span))
            .map(|(s, (l, w))| l + s.clamp(0.0, 1.0) * w)
            .collect()
    }

    fn to_scaled(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.span))
            .map(|(x, (l, w))| if *w > 0.0 { ((x - l) / w).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }

    fn rollout(&self, flat_u: &[f64]) -> Option<Rollout> {
        let cfg = self.config;
        let n = cfg.horizon;
        let mut states = Vec::with_capacity(n + 1);
        states.push(self.x0.to_vec());
        let mut cost = 0.0;
        let mut vsum = 0.0;
        let mut vmax = 0.0f64;
        for i in 0..n {
            let u = &flat_u[i * self.nu..(i + 1) * self.nu];
            let x = &states[i];
            cost += stage_cost(x, u, cfg);
            if i > 0 {
                for r in cfg.state_bounds.residual(x) {
                    vsum += r;
                    vmax = vmax.max(r);
                }
            }
            let next = self.model.step_nominal(x, u).ok()?;
            states.push(next);
        }
        if let Some(t) = &cfg.terminal_set {
            for r in t.residual(&states[n]) {
                vsum += r;
                vmax = vmax.max(r);
            }
        }
        Some(Rollout {
            states,
            cost,
            violation_sum: vsum,
            violation_max: vmax,
        })
    }
}

/// Penalized objective on scaled inputs.
struct Penalized<'p, 'a> {
    problem: &'p Problem<'a>,
    mu: f64,
    evals: usize,
}

impl Penalized<'_, '_> {
    fn value(&mut self, v: &[f64]) -> f64 {
        self.evals += 1;
        match self.problem.rollout(&self.problem.to_inputs(v)) {
            Some(r) => r.cost + self.mu * r.violation_sum,
            None => f64::INFINITY,
        }
    }

    fn gradient(&mut self, v: &[f64], f0: f64) -> Vec<f64> {
        const H: f64 = 1e-7;
        let mut g = vec![0.0; v.len()];
        let mut p = v.to_vec();
        for k in 0..v.len() {
            if self.problem.span[k] == 0.0 {
                continue;
            }
            let up = (v[k] + H).min(1.0);
            let dn = (v[k] - H).max(0.0);
            p[k] = up;
            let fu = if up > v[k] { self.value(&p) } else { f0 };
            p[k] = dn;
            let fd = if dn < v[k] { self.value(&p) } else { f0 };
            p[k] = v[k];
            g[k] = (fu - fd) / (up - dn);
        }
        g
    }
}

fn projected_gradient(v: &[f64], g: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(g)
        .map(|(&x, &gi)| {
            if (x <= 0.0 && gi > 0.0) || (x >= 1.0 && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

struct InnerResult {
    v: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
}

/// Projected BFGS with Armijo backtracking and a compass-search fallback.
fn minimize_box(obj: &mut Penalized, start: Vec<f64>, settings: &SolverSettings) -> InnerResult {
    let n = start.len();
    let mut v = start;
    let mut f = obj.value(&v);
    if !f.is_finite() {
        return InnerResult {
            v,
            f,
            iterations: 0,
            converged: false,
        };
    }
    let mut g = obj.gradient(&v, f);
    let mut hinv = identity(n);
    let mut compass = 0.05;
    for it in 0..settings.max_iterations {
        let pg = projected_gradient(&v, &g);
        if inf_norm(&pg) <= settings.stationarity_tolerance * f.abs().max(1.0) {
            return InnerResult {
                v,
                f,
                iterations: it,
                converged: true,
            };
        }
        // Direction on the free variables only.
        let free: Vec<bool> = (0..n).map(|k| pg[k] != 0.0 && obj.problem.span[k] > 0.0).collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if free[i] {
                d[i] = -(0..n).filter(|&j| free[j]).map(|j| hinv[i][j] * g[j]).sum::<f64>();
            }
        }
        if (0..n).map(|i| d[i] * g[i]).sum::<f64>() >= 0.0 {
            hinv = identity(n);
            d = pg.iter().map(|x| -x).collect();
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..40 {
            let cand: Vec<f64> = (0..n).map(|i| (v[i] + alpha * d[i]).clamp(0.0, 1.0)).collect();
            let fc = obj.value(&cand);
            let decrease: f64 = (0..n).map(|i| g[i] * (cand[i] - v[i])).sum();
            if fc.is_finite() && fc <= f + 1e-4 * decrease && fc < f {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let (cand, fc) = match accepted {
            Some(a) => a,
            None => match compass_step(obj, &v, f, &mut compass) {
                Some(a) => {
                    hinv = identity(n);
                    a
                }
                None => {
                    return InnerResult {
                        v,
                        f,
                        iterations: it,
                        converged: true,
                    }
                }
            },
        };
        let gc = obj.gradient(&cand, fc);
        let s: Vec<f64> = (0..n).map(|i| cand[i] - v[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gc[i] - g[i]).collect();
        bfgs_update(&mut hinv, &s, &y);
        let df = f - fc;
        v = cand;
        f = fc;
        g = gc;
        if inf_norm(&s) < 1e-13 && df <= 1e-14 * f.abs().max(1.0) {
            return InnerResult {
                v,
                f,
                iterations: it + 1,
                converged: true,
            };
        }
    }
    InnerResult {
        v,
        f,
        iterations: settings.max_iterations,
        converged: false,
    }
}

/// Coordinate pattern search: first improving +-step, halving on failure.
fn compass_step(obj: &mut Penalized, v: &[f64], f: f64, step: &mut f64) -> Option<(Vec<f64>, f64)> {
    let n = v.len();
    while *step > 1e-10 {
        for k in 0..n {
            if obj.problem.span[k] == 0.0 {
                continue;
            }
            for dir in [-1.0, 1.0] {
                let mut c = v.to_vec();
                c[k] = (c[k] + dir * *step).clamp(0.0, 1.0);
                if c[k] == v[k] {
                    continue;
                }
                let fc = obj.value(&c);
                if fc < f {
                    return Some((c, fc));
                }
            }
        }
        *step *= 0.5;
    }
    None
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64]) {
    let n = s.len();
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let sn = s.iter().map(|a| a * a).sum::<f64>().sqrt();
    let yn = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(sy > 1e-12 * sn * yn) || !sy.is_finite() {
        return;
    }
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

struct Candidate {
    inputs: Vec<f64>,
    rollout: Rollout,
    converged: bool,
}

fn better(a: &Candidate, b: &Candidate, tol: f64) -> bool {
    let fa = a.rollout.violation_max <= tol;
    let fb = b.rollout.violation_max <= tol;
    match (fa, fb) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => {
            let (ja, jb) = (a.rollout.cost, b.rollout.cost);
            if (ja - jb).abs() <= 1e-12 * ja.abs().max(jb.abs()).max(1.0) {
                norm2(&a.inputs) < norm2(&b.inputs)
            } else {
                ja < jb
            }
        }
        (false, false) => {
            let (va, vb) = (a.rollout.violation_max, b.rollout.violation_max);
            if va != vb {
                va < vb
            } else {
                a.rollout.cost < b.rollout.cost
            }
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Solves the zone-tracking problem from the measured state `x0`.
///
/// Starts are tried in a fixed order: the supplied warm start, the input-box
/// midpoint, then seeded uniform draws. The warm start is also kept as a
/// candidate in its unoptimized form, so the result is never worse than it.
pub fn solve_zmpc(
    x0: &[f64],
    model: &SystemModel,
    config: &ZmpcConfig,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<OcpSolution> {
    config.validate(model)?;
    if x0.len() != model.state_dim() {
        return Err(ZmpcError::DimensionMismatch("x0 does not match the model".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(ZmpcError::NonFiniteInput("solve_zmpc"));
    }
    let problem = Problem::new(model, config, x0);
    let settings = &config.solver;
    let tol = settings.constraint_tolerance;
    let n = problem.dim();
    let nu = problem.nu;

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(ws) = warm_start {
        if ws.len() == config.horizon && ws.iter().all(|u| u.len() == nu) {
            let flat: Vec<f64> = ws.iter().flatten().copied().collect();
            starts.push(problem.to_scaled(&flat));
        } else {
            log::warn!("ignoring warm start of mismatched shape");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    if starts.len() < settings.multistart_count {
        starts.push(vec![0.5; n]);
    }
    while starts.len() < settings.multistart_count {
        starts.push((0..n).map(|_| rng.random::<f64>()).collect());
    }

    let mut diag = SolveDiagnostics::default();
    let mut best: Option<Candidate> = None;
    let consider = |c: Candidate, best: &mut Option<Candidate>| {
        if best.as_ref().map_or(true, |b| better(&c, b, tol)) {
            *best = Some(c);
        }
    };

    if warm_start.is_some() && !starts.is_empty() {
        let raw = problem.to_inputs(&starts[0]);
        if let Some(r) = problem.rollout(&raw) {
            consider(
                Candidate {
                    inputs: raw,
                    rollout: r,
                    converged: false,
                },
                &mut best,
            );
        }
    }

    let rounds_cap = settings.max_penalty_rounds();
    for start in &starts {
        diag.starts += 1;
        let mut v = start.clone();
        let mut mu = settings.penalty_initial;
        let mut converged = false;
        let mut rounds = 0;
        let mut obj = Penalized {
            problem: &problem,
            mu,
            evals: 0,
        };
        while rounds < rounds_cap {
            rounds += 1;
            obj.mu = mu;
            let res = minimize_box(&mut obj, v, settings);
            diag.iterations += res.iterations;
            v = res.v;
            converged = res.converged;
            if !res.f.is_finite() {
                break;
            }
            let viol = problem
                .rollout(&problem.to_inputs(&v))
                .map_or(f64::INFINITY, |r| r.violation_max);
            if viol <= tol || mu * settings.penalty_growth > settings.penalty_max {
                break;
            }
            mu *= settings.penalty_growth;
        }
        diag.penalty_rounds += rounds;
        diag.objective_evaluations += obj.evals;
        let inputs = problem.to_inputs(&v);
        if let Some(r) = problem.rollout(&inputs) {
            consider(
                Candidate {
                    inputs,
                    rollout: r,
                    converged,
                },
                &mut best,
            );
        }
    }

    let best = match best {
        Some(b) => b,
        None => {
            // Every start diverged; report the midpoint plan as infeasible.
            let mid = problem.to_inputs(&vec![0.5; n]);
            return Ok(OcpSolution {
                inputs: mid.chunks(nu).map(|c| c.to_vec()).collect(),
                predicted_states: vec![x0.to_vec()],
                objective_value: f64::INFINITY,
                max_constraint_violation: f64::INFINITY,
                status: SolveStatus::Infeasible,
                diagnostics: diag,
            });
        }
    };
    let x0_ok = config.state_bounds.residual_l1(x0) <= tol;
    let feasible = best.rollout.violation_max <= tol;
    let status = if !feasible {
        SolveStatus::Infeasible
    } else if x0_ok && best.converged {
        SolveStatus::Optimal
    } else if x0_ok && warm_start.is_some() {
        // Unoptimized warm start retained: still optimal when no optimized
        // start could improve on it.
        SolveStatus::Optimal
    } else {
        SolveStatus::FeasibleSuboptimal
    };
    log::trace!(
        "solve: status {:?} J {:.6e} viol {:.2e} iters {} rounds {}",
        status,
        best.rollout.cost,
        best.rollout.violation_max,
        diag.iterations,
        diag.penalty_rounds
    );
    Ok(OcpSolution {
        inputs: best.inputs.chunks(nu).map(|c| c.to_vec()).collect(),
        predicted_states: best.rollout.states,
        objective_value: best.rollout.cost,
        max_constraint_violation: best.rollout.violation_max,
        status,
        diagnostics: diag,
    })
}

/// Optimal value `V_N^0(x0)` with at least eight starts.
pub fn evaluate_value_function(x0: &[f64], model: &SystemModel, config: &ZmpcConfig) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.solver.multistart_count = cfg.solver.multistart_count.max(8);
    Ok(solve_zmpc(x0, model, &cfg, None)?.objective_value)
}
