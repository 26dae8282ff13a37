//! Optimal feedback control of the mean-field chain.
//!
//! The Hamiltonian is `H(t, i, mu, z, u) = f(t, i, mu, u) + sum_j z_ij (lambda_ij - g_ij)`.
//! Controls are feedback policies on the grid nodes: the action chosen at
//! node `t_k` is held on the cell `[t_k, t_{k+1})`.

mod feedback;
mod oracle;

pub use feedback::{solve_control, solve_feedback, FeedbackSolution, SolveOptions};
pub use oracle::{
    brute_force_oracle, certify_near_optimal, ekeland_distance, enumerate_policies, evaluate_cost, policy_count,
    policy_value, reference_flow, CertificationReport, CostEstimate, CostMethod, OracleEntry, OracleResult,
    ORACLE_GUARD,
};

use serde::Serialize;

use crate::bsde::Driver;
use crate::chain::forward::substeps;
use crate::chain::measure::{MeasureFlow, ProbVector, TimeGrid};
use crate::chain::space::{Generator, Support};
use crate::error::{invalid, Error, Result};
use crate::mean_field::PicardOptions;
use crate::model::{check_shared_support, ControlSchedule, Controls, CostModel, IntensityModel};

/// Finite action set with the metric `|a - b|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlGrid {
    actions: Vec<f64>,
}

impl ControlGrid {
    pub fn new(actions: Vec<f64>) -> Result<Self> {
        if actions.is_empty() {
            return Err(invalid("action grid is empty"));
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(invalid("actions must be finite"));
        }
        Ok(ControlGrid { actions })
    }

    pub fn singleton(a: f64) -> Self {
        ControlGrid { actions: vec![a] }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn value(&self, k: usize) -> f64 {
        self.actions[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.actions
    }

    pub fn delta(&self, a: usize, b: usize) -> f64 {
        (self.actions[a] - self.actions[b]).abs()
    }
}

/// Action index per `(grid node, state)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct FeedbackPolicy {
    nodes: usize,
    n: usize,
    actions: Vec<usize>,
}

impl FeedbackPolicy {
    pub fn constant(nodes: usize, n: usize, a: usize) -> Self {
        FeedbackPolicy { nodes, n, actions: vec![a; nodes * n] }
    }

    pub fn from_fn(nodes: usize, n: usize, f: impl Fn(usize, usize) -> usize) -> Self {
        let actions = (0..nodes).flat_map(|k| (0..n).map(move |i| (k, i))).map(|(k, i)| f(k, i)).collect();
        FeedbackPolicy { nodes, n, actions }
    }

    /// Piecewise-constant policy from a `coarse_cells x n` table. Fine node
    /// `k < K` takes the coarse cell holding the midpoint of fine cell `k`;
    /// the terminal node copies node `K - 1`.
    pub fn from_coarse(grid: &TimeGrid, coarse_cells: usize, n: usize, table: &[usize]) -> Self {
        let width = grid.horizon() / coarse_cells as f64;
        let coarse = |k: usize| {
            let k = k.min(grid.cells() - 1);
            let m = 0.5 * (grid.t(k) + grid.t(k + 1));
            ((m / width).floor() as usize).min(coarse_cells - 1)
        };
        FeedbackPolicy::from_fn(grid.nodes(), n, |k, i| table[coarse(k) * n + i])
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, k: usize, i: usize) -> usize {
        self.actions[k * self.n + i]
    }

    pub fn set(&mut self, k: usize, i: usize, a: usize) {
        self.actions[k * self.n + i] = a;
    }

    pub fn validate(&self, grid: &TimeGrid, n: usize, actions: usize) -> Result<()> {
        if self.nodes != grid.nodes() || self.n != n {
            return Err(Error::DimensionMismatch { expected: grid.nodes() * n, got: self.nodes * self.n });
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= actions) {
            return Err(invalid(format!("action index {a} outside a grid of {actions}")));
        }
        Ok(())
    }
}

/// Model, costs, reference chain and grids of a control problem.
pub struct ControlProblem<'a> {
    pub model: &'a dyn IntensityModel,
    pub cost: &'a dyn CostModel,
    pub gen: &'a Generator,
    pub xi: ProbVector,
    pub grid: TimeGrid,
    pub picard: PicardOptions,
}

impl ControlProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        check_shared_support(self.model, self.gen)?;
        if self.xi.n() != self.model.n() {
            return Err(Error::DimensionMismatch { expected: self.model.n(), got: self.xi.n() });
        }
        Ok(())
    }
}

/// Action grids of the minimizing player `u` and, in games, the maximizing
/// player `v`.
#[derive(Debug, Clone, Copy)]
pub struct Players<'a> {
    pub u: &'a ControlGrid,
    pub v: Option<&'a ControlGrid>,
}

impl Players<'_> {
    pub fn controls(&self, a: usize, b: Option<usize>) -> Controls {
        Controls { u: Some(self.u.value(a)), v: self.v.zip(b).map(|(g, b)| g.value(b)) }
    }

    /// Every `(u, v)` index pair, `u` major.
    fn pairs(&self) -> Vec<(usize, Option<usize>)> {
        let mut out = Vec::new();
        for a in 0..self.u.len() {
            match self.v {
                None => out.push((a, None)),
                Some(v) => out.extend((0..v.len()).map(|b| (a, Some(b)))),
            }
        }
        out
    }

    /// Controls in force on each cell.
    pub fn schedule(&self, u: &FeedbackPolicy, v: Option<&FeedbackPolicy>, cells: usize) -> ControlSchedule {
        ControlSchedule::from_fn(cells, u.n(), |k, i| self.controls(u.at(k, i), v.map(|p| p.at(k, i))))
    }
}

/// `H = f + sum_j z_ij (lambda_ij - g_ij)` over the support row of `i`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    model: &dyn IntensityModel,
    cost: &dyn CostModel,
    gen: &Generator,
    t: f64,
    i: usize,
    mu: &ProbVector,
    z: &[f64],
    c: Controls,
) -> Result<f64> {
    let floor = model.floor();
    let mut h = cost.running(t, i, mu, c);
    for j in model.support().row(i) {
        let r = model.rate(t, i, j, mu, c);
        if !(r >= floor) || !r.is_finite() {
            return Err(Error::RateBelowFloor { i, j, t, rate: r, floor });
        }
        h += z[j] * (r - gen.rate(i, j));
    }
    Ok(h)
}

/// Lowest-index minimizer of `H` over the action grid, with the minimum.
#[allow(clippy::too_many_arguments)]
pub fn minimize_hamiltonian(
    model: &dyn IntensityModel,
    cost: &dyn CostModel,
    gen: &Generator,
    t: f64,
    i: usize,
    mu: &ProbVector,
    z: &[f64],
    grid: &ControlGrid,
) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for a in 0..grid.len() {
        let h = hamiltonian(model, cost, gen, t, i, mu, z, Controls::u(grid.value(a)))?;
        if h < best.1 {
            best = (a, h);
        }
    }
    Ok(best)
}

/// Lower and upper values of a finite matrix game `H[u][v]` and their
/// optimizers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Minimax {
    /// `max_v min_u H`.
    pub lower: f64,
    /// `min_u max_v H`.
    pub upper: f64,
    /// `(u, v)` attaining the lower value.
    pub lower_pair: (usize, usize),
    /// `(u, v)` attaining the upper value.
    pub upper_pair: (usize, usize),
}

impl Minimax {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }

    /// Saddle selection: `u` from the upper problem, `v` from the lower.
    pub fn saddle(&self) -> (usize, usize) {
        (self.upper_pair.0, self.lower_pair.1)
    }
}

/// Lowest-index tie-breaking minimax of a `|U| x |V|` table (row major).
pub fn matrix_minimax(table: &[f64], nu: usize, nv: usize) -> Minimax {
    let mut lower = (f64::NEG_INFINITY, (0, 0));
    for b in 0..nv {
        let mut m = (f64::INFINITY, 0);
        for a in 0..nu {
            if table[a * nv + b] < m.0 {
                m = (table[a * nv + b], a);
            }
        }
        if m.0 > lower.0 {
            lower = (m.0, (m.1, b));
        }
    }
    let mut upper = (f64::INFINITY, (0, 0));
    for a in 0..nu {
        let mut m = (f64::NEG_INFINITY, 0);
        for b in 0..nv {
            if table[a * nv + b] > m.0 {
                m = (table[a * nv + b], b);
            }
        }
        if m.0 < upper.0 {
            upper = (m.0, (a, m.1));
        }
    }
    Minimax { lower: lower.0, upper: upper.0, lower_pair: lower.1, upper_pair: upper.1 }
}

/// Which optimized Hamiltonian a backward pass integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HamiltonianKind {
    /// `min_u max_v H` (the plain minimum without a `v` player).
    Upper,
    /// `max_v min_u H`.
    Lower,
}

/// Optimized Hamiltonian and the selected actions at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Selection {
    pub u: usize,
    pub v: Option<usize>,
    pub lower: f64,
    pub upper: f64,
}

pub(crate) fn select(
    problem: &ControlProblem<'_>,
    players: Players<'_>,
    t: f64,
    i: usize,
    mu: &ProbVector,
    z: &[f64],
) -> Result<Selection> {
    let (model, cost, gen) = (problem.model, problem.cost, problem.gen);
    match players.v {
        None => {
            let (a, h) = minimize_hamiltonian(model, cost, gen, t, i, mu, z, players.u)?;
            Ok(Selection { u: a, v: None, lower: h, upper: h })
        }
        Some(vg) => {
            let mm = lower_upper_table(problem, players.u, vg, t, i, mu, z)?;
            let (a, b) = mm.saddle();
            Ok(Selection { u: a, v: Some(b), lower: mm.lower, upper: mm.upper })
        }
    }
}

pub(crate) fn lower_upper_table(
    problem: &ControlProblem<'_>,
    ug: &ControlGrid,
    vg: &ControlGrid,
    t: f64,
    i: usize,
    mu: &ProbVector,
    z: &[f64],
) -> Result<Minimax> {
    let mut table = Vec::with_capacity(ug.len() * vg.len());
    for a in 0..ug.len() {
        for b in 0..vg.len() {
            let c = Controls::uv(ug.value(a), vg.value(b));
            table.push(hamiltonian(problem.model, problem.cost, problem.gen, t, i, mu, z, c)?);
        }
    }
    Ok(matrix_minimax(&table, ug.len(), vg.len()))
}

/// Backward driver `phi = H_opt(t, i, z) + sum_j g_ij z_ij`, so that
/// `dy_i/dt = -min_u [f + sum_j lambda_ij z_ij]` (or its minimax version).
pub struct OptimizedDriver<'a> {
    pub problem: &'a ControlProblem<'a>,
    pub players: Players<'a>,
    pub flow: &'a MeasureFlow,
    pub kind: HamiltonianKind,
}

impl Driver for OptimizedDriver<'_> {
    fn n(&self) -> usize {
        self.problem.model.n()
    }

    fn flow(&self) -> &MeasureFlow {
        self.flow
    }

    fn support(&self) -> &Support {
        self.problem.model.support()
    }

    fn phi(&self, _cell: usize, t: f64, i: usize, mu: &ProbVector, y: &[f64]) -> Result<f64> {
        let n = y.len();
        let mut z = vec![0.0; n];
        let mut gz = 0.0;
        for j in self.problem.model.support().row(i) {
            z[j] = y[j] - y[i];
            gz += self.problem.gen.rate(i, j) * z[j];
        }
        let s = select(self.problem, self.players, t, i, mu, &z)?;
        let h = match self.kind {
            HamiltonianKind::Upper => s.upper,
            HamiltonianKind::Lower => s.lower,
        };
        Ok(h + gz)
    }

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64 {
        self.problem.cost.terminal(i, mu)
    }

    fn cell_substeps(&self, cell: usize) -> Result<usize> {
        let grid = self.flow.grid();
        let (a, b) = (grid.t(cell), grid.t(cell + 1));
        let mut m: f64 = 0.0;
        for t in [a, 0.5 * (a + b), b] {
            m = m.max(self.max_exit_rate(cell, t)?);
        }
        Ok(substeps(m, b - a))
    }

    fn max_exit_rate(&self, cell: usize, t: f64) -> Result<f64> {
        let mu = self.flow.in_cell(cell, t);
        let model = self.problem.model;
        let mut row = vec![0.0; model.n()];
        let mut m: f64 = 0.0;
        for (a, b) in self.players.pairs() {
            for i in 0..model.n() {
                crate::model::rate_row(model, t, i, &mu, self.players.controls(a, b), &mut row)?;
                m = m.max(row.iter().sum());
            }
        }
        Ok(m)
    }
}
