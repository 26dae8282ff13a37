//! Cost evaluation, policy distances, enumeration and certification.

use rayon::prelude::*;
use serde::Serialize;

use super::{ControlGrid, ControlProblem, FeedbackPolicy, Players};
use crate::bsde::{solve_backward, PolicyDriver, ValueField};
use crate::chain::forward::solve_forward;
use crate::chain::measure::{MeasureFlow, ProbVector, TimeGrid};
use crate::chain::paths::simulate_paths;
use crate::chain::space::Generator;
use crate::error::{invalid, Error, Result};
use crate::girsanov::{TiltContext, MIN_ESS};
use crate::mean_field::{picard_fixed_point, FixedPointResult};
use crate::rng;
use crate::stats::{effective_sample_size, Estimate};

/// Largest number of policies any enumeration will visit.
pub const ORACLE_GUARD: usize = 100_000;

/// Flow and policy-frozen value field of a policy pair.
pub fn policy_value(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    u: &FeedbackPolicy,
    v: Option<&FeedbackPolicy>,
) -> Result<(FixedPointResult, ValueField)> {
    problem.validate()?;
    u.validate(&problem.grid, problem.model.n(), players.u.len())?;
    if let (Some(p), Some(g)) = (v, players.v) {
        p.validate(&problem.grid, problem.model.n(), g.len())?;
    }
    let sched = players.schedule(u, v, problem.grid.cells());
    let fp = picard_fixed_point(problem.model, &problem.xi, &problem.grid, &sched, &problem.picard)?;
    let vf =
        solve_backward(&PolicyDriver { model: problem.model, cost: problem.cost, flow: &fp.flow, schedule: &sched })?;
    Ok((fp, vf))
}

/// How [`evaluate_cost`] computes `J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CostMethod {
    /// Initial value of the policy-frozen backward equation.
    Field,
    /// Girsanov-weighted average over reference paths.
    MonteCarlo { n_paths: usize, seed: u64, workers: usize },
}

/// A cost value, with its standard error for Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub se: Option<f64>,
}

/// `J(u) = E^u[int_0^T f dt + h(x_T, mu_T)]`.
pub fn evaluate_cost(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    u: &FeedbackPolicy,
    v: Option<&FeedbackPolicy>,
    method: CostMethod,
) -> Result<CostEstimate> {
    let (fp, vf) = policy_value(problem, players, u, v)?;
    match method {
        CostMethod::Field => Ok(CostEstimate { value: vf.initial_value(&problem.xi), se: None }),
        CostMethod::MonteCarlo { n_paths, seed, workers } => {
            let sched = players.schedule(u, v, problem.grid.cells());
            let flow = &fp.flow;
            let ctx = TiltContext::new(problem.model, problem.gen, flow, &sched)?;
            let ens = simulate_paths(problem.gen, &problem.xi, problem.grid.horizon(), n_paths, seed, workers)?;
            let lw = ctx.log_weights(&ens, workers)?;
            let w = lw.weights();
            let ess = effective_sample_size(&w);
            if ess < MIN_ESS {
                return Err(Error::DegenerateWeights { ess });
            }
            let costs = rng::with_workers(workers, || {
                ens.paths
                    .par_iter()
                    .map(|p| {
                        let mut c = 0.0;
                        for (i, a, b) in p.segments() {
                            ctx.for_each_piece(i, a, b, |cell, i, m, len| {
                                c += problem.cost.running(m, i, &flow.in_cell(cell, m), sched.at(cell, i)) * len;
                                Ok(())
                            })?;
                        }
                        Ok(c + problem.cost.terminal(p.terminal_state(), flow.terminal()))
                    })
                    .collect::<Result<Vec<f64>>>()
            })?;
            let samples: Vec<f64> = w.iter().zip(&costs).map(|(w, c)| w * c).collect();
            let e = Estimate::from_samples(&samples);
            Ok(CostEstimate { value: e.mean, se: Some(e.se) })
        }
    }
}

/// Flow of the reference chain started from `xi`.
pub fn reference_flow(gen: &Generator, xi: &ProbVector, grid: &TimeGrid) -> Result<MeasureFlow> {
    solve_forward(&vec![gen.rates().clone(); grid.cells()], xi, grid)
}

/// `d_E(u, v) = int_0^T sum_i mu_t(i) 1{u(t, i) != v(t, i)} dt` under the
/// reference flow, by the trapezoid rule on each cell.
pub fn ekeland_distance(u: &FeedbackPolicy, v: &FeedbackPolicy, reference: &MeasureFlow) -> Result<f64> {
    let grid = reference.grid();
    if u.nodes() != grid.nodes() || v.nodes() != grid.nodes() || u.n() != v.n() || u.n() != reference.n() {
        return Err(Error::DimensionMismatch { expected: grid.nodes(), got: u.nodes().min(v.nodes()) });
    }
    let mut d = 0.0;
    for k in 0..grid.cells() {
        let mut mass = 0.0;
        for i in 0..u.n() {
            if u.at(k, i) != v.at(k, i) {
                mass += 0.5 * (reference.at_node(k).get(i) + reference.at_node(k + 1).get(i));
            }
        }
        d += mass * grid.dt(k);
    }
    Ok(d)
}

/// Number of piecewise-constant policies on `cells x n` with `actions`
/// choices each, as a float to survive overflow.
pub fn policy_count(actions: usize, cells: usize, n: usize) -> f64 {
    (actions as f64).powi((cells * n) as i32)
}

fn decode(mut id: usize, actions: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = id % actions;
            id /= actions;
            d
        })
        .collect()
}

/// One row of the oracle table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleEntry {
    pub id: usize,
    /// Action index per `(coarse cell, state)`, cell major.
    pub encoded: Vec<usize>,
    pub cost: f64,
}

/// Exhaustive search over piecewise-constant policies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub coarse_cells: usize,
    pub best: usize,
    pub best_policy: FeedbackPolicy,
    pub best_cost: f64,
    pub table: Vec<OracleEntry>,
}

/// Evaluate `cost_of(policy)` for every piecewise-constant policy on
/// `coarse_cells`, in parallel, returned in id order.
pub fn enumerate_policies(
    grid: &TimeGrid,
    n: usize,
    actions: usize,
    coarse_cells: usize,
    workers: usize,
    cost_of: impl Fn(&FeedbackPolicy) -> Result<f64> + Sync,
) -> Result<Vec<OracleEntry>> {
    if coarse_cells == 0 || coarse_cells > grid.cells() {
        return Err(invalid("coarse cell count must be between 1 and the fine cell count"));
    }
    let count = policy_count(actions, coarse_cells, n);
    if count > ORACLE_GUARD as f64 {
        return Err(Error::TooLarge { count, limit: ORACLE_GUARD });
    }
    let len = coarse_cells * n;
    rng::with_workers(workers, || {
        (0..count as usize)
            .into_par_iter()
            .map(|id| {
                let encoded = decode(id, actions, len);
                let p = FeedbackPolicy::from_coarse(grid, coarse_cells, n, &encoded);
                Ok(OracleEntry { id, encoded, cost: cost_of(&p)? })
            })
            .collect()
    })
}

/// Exhaustive minimization of the field cost over piecewise-constant
/// policies of a single player on `coarse_cells` equal cells.
pub fn brute_force_oracle(
    problem: &ControlProblem<'_>,
    grid: &ControlGrid,
    coarse_cells: usize,
    workers: usize,
) -> Result<OracleResult> {
    let players = Players { u: grid, v: None };
    let n = problem.model.n();
    let table = enumerate_policies(&problem.grid, n, grid.len(), coarse_cells, workers, |p| {
        Ok(policy_value(problem, players, p, None)?.1.initial_value(&problem.xi))
    })?;
    let mut best = 0;
    for e in &table {
        if e.cost < table[best].cost {
            best = e.id;
        }
    }
    let best_policy = FeedbackPolicy::from_coarse(&problem.grid, coarse_cells, n, &table[best].encoded);
    Ok(OracleResult { coarse_cells, best, best_policy, best_cost: table[best].cost, table })
}

/// Outcome of [`certify_near_optimal`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub cost: f64,
    pub oracle: f64,
    pub eps: f64,
    /// Excess cost `cost - oracle`; the check passes when it is at most `eps`.
    pub slack: f64,
    pub passed: bool,
}

/// Check `J(u) <= J_oracle + eps`.
pub fn certify_near_optimal(cost: f64, eps: f64, oracle: &OracleResult) -> Result<CertificationReport> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let slack = cost - oracle.best_cost;
    if !(slack <= eps) {
        return Err(Error::CertificationFailed { cost, oracle: oracle.best_cost, eps });
    }
    Ok(CertificationReport { cost, oracle: oracle.best_cost, eps, slack, passed: true })
}
