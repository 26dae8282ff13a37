//! The coupled forward-backward loop shared by control and games.

use serde::Serialize;

use super::{select, ControlGrid, ControlProblem, FeedbackPolicy, HamiltonianKind, OptimizedDriver, Players};
use crate::bsde::{solve_backward, PolicyDriver, ValueField};
use crate::chain::measure::MeasureFlow;
use crate::error::{invalid, Error, Result};
use crate::mean_field::{picard_fixed_point, PicardOptions};

/// Outer-loop limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Picard tolerance for the flow under each policy.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: 50 }
    }
}

/// Result of the feedback loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackSolution {
    pub u_policy: FeedbackPolicy,
    pub v_policy: Option<FeedbackPolicy>,
    /// Fixed-point flow under the returned policies.
    pub flow: MeasureFlow,
    /// Policy-frozen value field; `cost` is its initial value.
    pub value: ValueField,
    /// Optimized-Hamiltonian field on `flow` from which the policies were read.
    pub hamiltonian_field: ValueField,
    pub cost: f64,
    pub iterations: usize,
    /// Sup-distance between consecutive flows.
    pub gaps: Vec<f64>,
    /// Iterations at which a policy cycle triggered a frozen-flow pass.
    pub damped_at: Vec<usize>,
}

type PolicyPair = (FeedbackPolicy, Option<FeedbackPolicy>);

fn policies_from_field(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    flow: &MeasureFlow,
    field: &ValueField,
) -> Result<PolicyPair> {
    let grid = flow.grid();
    let n = problem.model.n();
    let mut u = FeedbackPolicy::constant(grid.nodes(), n, 0);
    let mut v = players.v.map(|_| FeedbackPolicy::constant(grid.nodes(), n, 0));
    for k in 0..grid.nodes() {
        let mu = flow.at_node(k);
        for i in 0..n {
            let s = select(problem, players, grid.t(k), i, mu, &field.z_row(k, i))?;
            u.set(k, i, s.u);
            if let (Some(p), Some(b)) = (v.as_mut(), s.v) {
                p.set(k, i, b);
            }
        }
    }
    Ok((u, v))
}

fn flow_under(problem: &ControlProblem<'_>, players: Players<'_>, pol: &PolicyPair, tol: f64) -> Result<MeasureFlow> {
    let sched = players.schedule(&pol.0, pol.1.as_ref(), problem.grid.cells());
    let opts = PicardOptions { tol, entropy: false, ..problem.picard.clone() };
    Ok(picard_fixed_point(problem.model, &problem.xi, &problem.grid, &sched, &opts)?.flow)
}

fn policy_field(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    pol: &PolicyPair,
    flow: &MeasureFlow,
) -> Result<ValueField> {
    let sched = players.schedule(&pol.0, pol.1.as_ref(), problem.grid.cells());
    solve_backward(&PolicyDriver { model: problem.model, cost: problem.cost, flow, schedule: &sched })
}

/// Iterate: flow of the current policies, backward pass with the optimized
/// Hamiltonian, pointwise re-selection. Stops when the policies repeat.
///
/// When the new policies revisit an earlier pair the flow is held fixed for
/// one extra pass: the proposed policies are evaluated on the frozen flow and
/// the selection is redone from their field. A second cycle after that pass
/// ends the loop with `NotConverged`.
pub fn solve_feedback(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    opts: &SolveOptions,
) -> Result<FeedbackSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(invalid("solver tolerance and iteration budget must be positive"));
    }
    let n = problem.model.n();
    let nodes = problem.grid.nodes();
    let mut pol: PolicyPair =
        (FeedbackPolicy::constant(nodes, n, 0), players.v.map(|_| FeedbackPolicy::constant(nodes, n, 0)));
    let mut flow = flow_under(problem, players, &pol, opts.tol)?;
    let mut history = vec![pol.clone()];
    let mut gaps = Vec::new();
    let mut damped_at = Vec::new();
    for iter in 1..=opts.max_iter {
        let driver = OptimizedDriver { problem, players, flow: &flow, kind: HamiltonianKind::Upper };
        let field = solve_backward(&driver)?;
        let mut next = policies_from_field(problem, players, &flow, &field)?;
        if next == pol {
            let value = policy_field(problem, players, &pol, &flow)?;
            let cost = value.initial_value(&problem.xi);
            return Ok(FeedbackSolution {
                u_policy: pol.0,
                v_policy: pol.1,
                flow,
                value,
                hamiltonian_field: field,
                cost,
                iterations: iter,
                gaps,
                damped_at,
            });
        }
        if history.contains(&next) {
            if !damped_at.is_empty() {
                return Err(Error::NotConverged {
                    gaps,
                    detail: format!(
                        "policy cycle at iteration {iter} persists after a frozen-flow pass at iteration {}",
                        damped_at[0]
                    ),
                });
            }
            damped_at.push(iter);
            let frozen = policy_field(problem, players, &next, &flow)?;
            next = policies_from_field(problem, players, &flow, &frozen)?;
        }
        let next_flow = flow_under(problem, players, &next, opts.tol)?;
        gaps.push(next_flow.sup_tv(&flow)?);
        history.push(next.clone());
        pol = next;
        flow = next_flow;
    }
    Err(Error::NotConverged { gaps, detail: format!("policies still changing after {} iterations", opts.max_iter) })
}

/// Optimal feedback control for a single minimizing player.
pub fn solve_control(
    problem: &ControlProblem<'_>,
    grid: &ControlGrid,
    opts: &SolveOptions,
) -> Result<FeedbackSolution> {
    solve_feedback(problem, Players { u: grid, v: None }, opts)
}
