//! Two-player zero-sum games: lower and upper Hamiltonians, the Isaacs
//! check, saddle-point computation and unilateral-deviation verification.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_backward, ValueField};
use crate::chain::measure::{MeasureFlow, ProbVector};
use crate::control::{
    enumerate_policies, policy_count, policy_value, solve_feedback, ControlGrid, ControlProblem, FeedbackPolicy,
    HamiltonianKind, Minimax, OptimizedDriver, Players, SolveOptions, ORACLE_GUARD,
};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Default tolerance on `H_upper - H_lower` for certifying the Isaacs
/// condition.
pub const ISAACS_TOL: f64 = 1e-9;

/// Default tolerance of the saddle inequalities.
pub const SADDLE_TOL: f64 = 1e-8;

/// Number of random `z` draws added to the node samples of an Isaacs check.
pub const ISAACS_RANDOM_DRAWS: usize = 100;

/// A zero-sum game: `u` minimizes and `v` maximizes `J(u, v)`.
pub struct GameSpec<'a> {
    pub problem: ControlProblem<'a>,
    pub u: &'a ControlGrid,
    pub v: &'a ControlGrid,
}

impl GameSpec<'_> {
    pub fn players(&self) -> Players<'_> {
        Players { u: self.u, v: Some(self.v) }
    }
}

/// `max_v min_u H` and `min_u max_v H` at one point, with lowest-index
/// optimizers.
pub fn lower_upper_hamiltonian(game: &GameSpec<'_>, t: f64, i: usize, mu: &ProbVector, z: &[f64]) -> Result<Minimax> {
    crate::control::lower_upper_table(&game.problem, game.u, game.v, t, i, mu, z)
}

/// One evaluation point of the Isaacs check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsaacsSample {
    pub t: f64,
    pub i: usize,
    pub mu: ProbVector,
    pub z: Vec<f64>,
}

/// Largest Isaacs gap over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsaacsReport {
    pub max_gap: f64,
    pub at: IsaacsSample,
    pub samples: usize,
    /// Points where `H_lower > H_upper`; always zero for a correct minimax.
    pub minimax_violations: usize,
}

impl IsaacsReport {
    pub fn certified(&self, tol: f64) -> bool {
        self.max_gap <= tol && self.minimax_violations == 0
    }
}

/// Every node and state of `field` on `flow`.
pub fn node_samples(flow: &MeasureFlow, field: &ValueField) -> Vec<IsaacsSample> {
    let grid = flow.grid();
    let mut out = Vec::with_capacity(grid.nodes() * field.n());
    for k in 0..grid.nodes() {
        for i in 0..field.n() {
            out.push(IsaacsSample { t: grid.t(k), i, mu: flow.at_node(k).clone(), z: field.z_row(k, i) });
        }
    }
    out
}

/// Node samples of a reference solve (the all-first-action policy pair) and
/// `ISAACS_RANDOM_DRAWS` random points with `z` uniform on `[-r, r]`, where
/// `r` is twice the field's sup norm plus one.
pub fn default_isaacs_samples(game: &GameSpec<'_>, seed: u64) -> Result<Vec<IsaacsSample>> {
    let p = &game.problem;
    let n = p.model.n();
    let base = FeedbackPolicy::constant(p.grid.nodes(), n, 0);
    let (fp, field) = policy_value(p, game.players(), &base, Some(&base))?;
    let mut out = node_samples(&fp.flow, &field);
    let sup = (0..p.grid.nodes()).flat_map(|k| field.node_values(k).to_vec()).fold(0.0, |m: f64, y| m.max(y.abs()));
    let r = 2.0 * sup + 1.0;
    let mut g = rng::stream(seed, 0);
    for _ in 0..ISAACS_RANDOM_DRAWS {
        let k = g.gen_range(0..p.grid.nodes());
        let i = g.gen_range(0..n);
        let mut z = vec![0.0; n];
        for j in p.model.support().row(i) {
            z[j] = g.gen_range(-r..=r);
        }
        out.push(IsaacsSample { t: p.grid.t(k), i, mu: fp.flow.at_node(k).clone(), z });
    }
    Ok(out)
}

/// Maximum of `H_upper - H_lower` over `samples`.
pub fn isaacs_check(game: &GameSpec<'_>, samples: &[IsaacsSample]) -> Result<IsaacsReport> {
    if samples.is_empty() {
        return Err(invalid("Isaacs check needs at least one sample"));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut violations = 0;
    for (s_idx, s) in samples.iter().enumerate() {
        let mm = lower_upper_hamiltonian(game, s.t, s.i, &s.mu, &s.z)?;
        if mm.lower > mm.upper {
            violations += 1;
        }
        let gap = mm.gap();
        if best.is_none_or(|(g, _)| gap > g) {
            best = Some((gap, s_idx));
        }
    }
    let (max_gap, idx) = best.expect("nonempty samples");
    Ok(IsaacsReport { max_gap, at: samples[idx].clone(), samples: samples.len(), minimax_violations: violations })
}

/// Saddle policies and the value field of a solved game.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSolution {
    pub u_policy: FeedbackPolicy,
    pub v_policy: FeedbackPolicy,
    pub flow: MeasureFlow,
    /// Policy-frozen field of `(u, v)`; `value` is its initial value.
    pub value_field: ValueField,
    pub value: f64,
    /// Backward solves on `flow` with the upper and lower Hamiltonians.
    pub upper_field: ValueField,
    pub lower_field: ValueField,
    /// Sup-distance between `upper_field` and `lower_field`.
    pub lower_upper_diff: f64,
    /// Largest Isaacs gap over the pre-solve samples and the solution's nodes.
    pub isaacs_gap_max: f64,
    pub iterations: usize,
    pub gaps: Vec<f64>,
}

/// Certify the Isaacs condition on the default samples, then run the
/// feedback loop with the saddle selection.
pub fn solve_game(game: &GameSpec<'_>, opts: &SolveOptions, isaacs_tol: f64, seed: u64) -> Result<GameSolution> {
    let pre = isaacs_check(game, &default_isaacs_samples(game, seed)?)?;
    if !pre.certified(isaacs_tol) {
        return Err(Error::IsaacsViolated { gap: pre.max_gap });
    }
    let sol = solve_feedback(&game.problem, game.players(), opts)?;
    let post = isaacs_check(game, &node_samples(&sol.flow, &sol.hamiltonian_field))?;
    if !post.certified(isaacs_tol) {
        return Err(Error::IsaacsViolated { gap: post.max_gap });
    }
    let lower = OptimizedDriver {
        problem: &game.problem,
        players: game.players(),
        flow: &sol.flow,
        kind: HamiltonianKind::Lower,
    };
    let lower_field = solve_backward(&lower)?;
    let lower_upper_diff = lower_field.max_abs_diff(&sol.hamiltonian_field);
    Ok(GameSolution {
        u_policy: sol.u_policy,
        v_policy: sol.v_policy.expect("two-player solve returns a v policy"),
        flow: sol.flow,
        value_field: sol.value,
        value: sol.cost,
        upper_field: sol.hamiltonian_field,
        lower_field,
        lower_upper_diff,
        isaacs_gap_max: pre.max_gap.max(post.max_gap),
        iterations: sol.iterations,
        gaps: sol.gaps,
    })
}

/// Which player deviates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Deviator {
    U,
    V,
}

/// One unilateral deviation and its saddle margin.
///
/// For `U` the margin is `J(u, v_hat) - J(u_hat, v_hat)`, for `V` it is
/// `J(u_hat, v_hat) - J(u_hat, v)`; both must be `>= -tol`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviation {
    pub player: Deviator,
    /// `Some((node, state, action))` for a single-node change; `None` for a
    /// full piecewise-constant policy with id `policy_id`.
    pub node: Option<(usize, usize, usize)>,
    pub policy_id: Option<usize>,
    pub cost: f64,
    pub margin: f64,
}

/// How many deviations [`verify_saddle`] inspects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationBudget {
    /// Coarse cells for the full enumeration; `None` picks the largest count
    /// within the guard, `Some(0)` skips it.
    pub coarse_cells: Option<usize>,
    pub tol: f64,
    pub workers: usize,
}

impl Default for DeviationBudget {
    fn default() -> Self {
        DeviationBudget { coarse_cells: None, tol: SADDLE_TOL, workers: 1 }
    }
}

/// Outcome of [`verify_saddle`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleReport {
    pub value: f64,
    pub deviations: Vec<Deviation>,
    /// Coarse cells used by the full enumeration (0 when skipped).
    pub coarse_cells: usize,
    pub min_margin: f64,
    pub passed: bool,
}

fn largest_coarse(actions: usize, cells: usize, n: usize) -> usize {
    (1..=cells).rev().find(|&c| policy_count(actions, c, n) <= ORACLE_GUARD as f64).unwrap_or(0)
}

/// Check `J(u_hat, v) <= J(u_hat, v_hat) <= J(u, v_hat)` over every
/// single-node action change on cells `0..K` and, within the enumeration
/// guard, over every piecewise-constant policy of each player.
pub fn verify_saddle(
    game: &GameSpec<'_>,
    u_hat: &FeedbackPolicy,
    v_hat: &FeedbackPolicy,
    budget: &DeviationBudget,
) -> Result<SaddleReport> {
    let p = &game.problem;
    let players = game.players();
    let n = p.model.n();
    let cells = p.grid.cells();
    let j = |u: &FeedbackPolicy, v: &FeedbackPolicy| -> Result<f64> {
        Ok(policy_value(p, players, u, Some(v))?.1.initial_value(&p.xi))
    };
    let value = j(u_hat, v_hat)?;

    let mut singles = Vec::new();
    for k in 0..cells {
        for i in 0..n {
            for a in (0..game.u.len()).filter(|&a| a != u_hat.at(k, i)) {
                singles.push((Deviator::U, k, i, a));
            }
            for b in (0..game.v.len()).filter(|&b| b != v_hat.at(k, i)) {
                singles.push((Deviator::V, k, i, b));
            }
        }
    }
    let mut deviations: Vec<Deviation> = rng::with_workers(budget.workers, || {
        singles
            .par_iter()
            .map(|&(who, k, i, a)| {
                let mut pol = if who == Deviator::U { u_hat.clone() } else { v_hat.clone() };
                pol.set(k, i, a);
                if k + 1 == cells {
                    pol.set(cells, i, a);
                }
                let (cost, margin) = match who {
                    Deviator::U => {
                        let c = j(&pol, v_hat)?;
                        (c, c - value)
                    }
                    Deviator::V => {
                        let c = j(u_hat, &pol)?;
                        (c, value - c)
                    }
                };
                Ok(Deviation { player: who, node: Some((k, i, a)), policy_id: None, cost, margin })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let coarse = match budget.coarse_cells {
        Some(c) => c,
        None => largest_coarse(game.u.len().max(game.v.len()), cells, n),
    };
    if coarse > 0 {
        let us = enumerate_policies(&p.grid, n, game.u.len(), coarse, budget.workers, |u| j(u, v_hat))?;
        deviations.extend(us.into_iter().map(|e| Deviation {
            player: Deviator::U,
            node: None,
            policy_id: Some(e.id),
            cost: e.cost,
            margin: e.cost - value,
        }));
        let vs = enumerate_policies(&p.grid, n, game.v.len(), coarse, budget.workers, |v| j(u_hat, v))?;
        deviations.extend(vs.into_iter().map(|e| Deviation {
            player: Deviator::V,
            node: None,
            policy_id: Some(e.id),
            cost: e.cost,
            margin: value - e.cost,
        }));
    }

    let worst = deviations.iter().min_by(|a, b| a.margin.total_cmp(&b.margin));
    let min_margin = worst.map_or(f64::INFINITY, |d| d.margin);
    if let Some(d) = worst.filter(|d| d.margin < -budget.tol) {
        return Err(Error::SaddleViolated {
            amount: -d.margin,
            detail: format!("{:?} deviation {:?} {:?} with cost {}", d.player, d.node, d.policy_id, d.cost),
        });
    }
    let report = SaddleReport { value, deviations, coarse_cells: coarse, min_margin, passed: true };
    Ok(report)
}
