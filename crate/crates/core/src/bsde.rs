//! Backward equations of the mean-field chain.
//!
//! With Markov-feedback data the BSDE `-dY = phi(t, x, Z) dt - Z dM`,
//! `Y_T = h(x_T, mu_T)` reduces to the backward system
//!
//! ```text
//! dy_i/dt = -f(t, i, mu_t) - sum_j lambda_ij(t, i, mu_t) (y_j - y_i),   y(T, i) = h(i, mu_T)
//! ```
//!
//! whose solution gives `Y_t = y(t, x_t)` and `Z_ij(t) = y(t, j) - y(t, i)`.
//! The system is integrated with RK4 on the same substeps as the forward
//! equation, and the solver keeps a cubic Hermite dense output so the field
//! can be read between nodes.

use serde::Serialize;

use crate::chain::forward::{for_each_piece, RateSource};
use crate::chain::measure::{MeasureFlow, ProbVector, TimeGrid};
use crate::chain::paths::PathSample;
use crate::chain::space::{Generator, Support};
use crate::error::{Error, Result};
use crate::model::{rate_row, ControlSchedule, CostModel, IntensityModel, ModelRates};

/// Driver of a backward equation, in the form integrated under the chain's
/// own intensities: `dy_i/dt = -phi(t, i, y)`.
pub trait Driver: Sync {
    fn n(&self) -> usize;

    fn flow(&self) -> &MeasureFlow;

    fn support(&self) -> &Support;

    /// `phi(t, i, y)` inside `cell`, with `mu` the flow at `t`.
    fn phi(&self, cell: usize, t: f64, i: usize, mu: &ProbVector, y: &[f64]) -> Result<f64>;

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64;

    /// Number of RK4 substeps in `cell`.
    fn cell_substeps(&self, cell: usize) -> Result<usize>;

    /// Largest exit rate seen by the driver at time `t` in `cell`.
    fn max_exit_rate(&self, cell: usize, t: f64) -> Result<f64>;
}

/// `phi = f(t, i, mu, c) + sum_j lambda_ij(t, i, mu, c) (y_j - y_i)` with the
/// controls read from a frozen schedule.
pub struct PolicyDriver<'a> {
    pub model: &'a dyn IntensityModel,
    pub cost: &'a dyn CostModel,
    pub flow: &'a MeasureFlow,
    pub schedule: &'a ControlSchedule,
}

impl PolicyDriver<'_> {
    fn rates(&self) -> ModelRates<'_> {
        ModelRates { model: self.model, flow: self.flow, schedule: self.schedule }
    }

    /// The same driver written against the reference chain:
    /// `f + sum_j (lambda_ij / g_ij - 1) z_ij g_ij`.
    pub fn reference_form(
        &self,
        gen: &Generator,
        cell: usize,
        t: f64,
        i: usize,
        mu: &ProbVector,
        y: &[f64],
    ) -> Result<f64> {
        let c = self.schedule.at(cell, i);
        let mut row = vec![0.0; self.model.n()];
        rate_row(self.model, t, i, mu, c, &mut row)?;
        let mut phi = self.cost.running(t, i, mu, c);
        for j in self.model.support().row(i) {
            let g = gen.rate(i, j);
            phi += (row[j] / g - 1.0) * (y[j] - y[i]) * g;
        }
        Ok(phi)
    }

    /// Stand-in for the driver's Lipschitz coefficient: `max_t max_i sum_j lambda_ij`.
    pub fn lipschitz_stand_in(&self) -> Result<f64> {
        let grid = self.flow.grid();
        let mut m: f64 = 0.0;
        for cell in 0..grid.cells() {
            for t in [grid.t(cell), grid.t(cell + 1)] {
                m = m.max(self.max_exit_rate(cell, t)?);
            }
        }
        Ok(m)
    }
}

impl Driver for PolicyDriver<'_> {
    fn n(&self) -> usize {
        self.model.n()
    }

    fn flow(&self) -> &MeasureFlow {
        self.flow
    }

    fn support(&self) -> &Support {
        self.model.support()
    }

    fn phi(&self, cell: usize, t: f64, i: usize, mu: &ProbVector, y: &[f64]) -> Result<f64> {
        let c = self.schedule.at(cell, i);
        let mut phi = self.cost.running(t, i, mu, c);
        for j in self.model.support().row(i) {
            phi += self.model.rate(t, i, j, mu, c) * (y[j] - y[i]);
        }
        if !phi.is_finite() {
            return Err(Error::StepUnstable { t, mass: phi });
        }
        Ok(phi)
    }

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64 {
        self.cost.terminal(i, mu)
    }

    fn cell_substeps(&self, cell: usize) -> Result<usize> {
        self.rates().cell_substeps(cell, self.flow.grid())
    }

    fn max_exit_rate(&self, cell: usize, t: f64) -> Result<f64> {
        let mu = self.flow.in_cell(cell, t);
        let n = self.model.n();
        let mut row = vec![0.0; n];
        let mut m: f64 = 0.0;
        for i in 0..n {
            rate_row(self.model, t, i, &mu, self.schedule.at(cell, i), &mut row)?;
            m = m.max(row.iter().sum());
        }
        Ok(m)
    }
}

/// Substep nodes of one cell with values and in-cell time derivatives.
#[derive(Debug, Clone, PartialEq)]
struct DenseCell {
    times: Vec<f64>,
    y: Vec<Vec<f64>>,
    dy: Vec<Vec<f64>>,
}

/// Solution field `y(t_k, i)` of a backward equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField {
    grid: TimeGrid,
    support: Support,
    y: Vec<Vec<f64>>,
    #[serde(skip)]
    dense: Vec<DenseCell>,
}

impl ValueField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.y[0].len()
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn y(&self, k: usize, i: usize) -> f64 {
        self.y[k][i]
    }

    pub fn node_values(&self, k: usize) -> &[f64] {
        &self.y[k]
    }

    /// `z_ij(t_k) = y(t_k, j) - y(t_k, i)`.
    pub fn z(&self, k: usize, i: usize, j: usize) -> f64 {
        self.y[k][j] - self.y[k][i]
    }

    /// Row `z_i.(t_k)` on the support, zero elsewhere.
    pub fn z_row(&self, k: usize, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n()];
        for j in self.support.row(i) {
            row[j] = self.z(k, i, j);
        }
        row
    }

    /// `sum_i xi_i y(0, i)`.
    pub fn initial_value(&self, xi: &ProbVector) -> f64 {
        xi.mass().iter().zip(&self.y[0]).map(|(p, y)| p * y).sum()
    }

    /// `max_{k,i} |y - other.y|`.
    pub fn max_abs_diff(&self, other: &ValueField) -> f64 {
        self.y.iter().zip(&other.y).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
    }

    /// Substep counts used by the solver, per cell.
    pub fn substeps(&self) -> Vec<usize> {
        self.dense.iter().map(|d| d.times.len() - 1).collect()
    }

    /// Hermite interpolation of the whole field at `t` inside `cell`.
    pub fn value_in_cell(&self, cell: usize, t: f64, out: &mut [f64]) {
        let d = &self.dense[cell];
        let nsub = d.times.len() - 1;
        let (c0, c1) = (d.times[0], d.times[nsub]);
        let hstep = (c1 - c0) / nsub as f64;
        let s = ((((t - c0) / hstep).floor()) as isize).clamp(0, nsub as isize - 1) as usize;
        let (t0, t1) = (d.times[s], d.times[s + 1]);
        let h = t1 - t0;
        let x = ((t - t0) / h).clamp(0.0, 1.0);
        let (x2, x3) = (x * x, x * x * x);
        let h00 = 2.0 * x3 - 3.0 * x2 + 1.0;
        let h10 = x3 - 2.0 * x2 + x;
        let h01 = -2.0 * x3 + 3.0 * x2;
        let h11 = x3 - x2;
        for (i, o) in out.iter_mut().enumerate() {
            *o = h00 * d.y[s][i] + h10 * h * d.dy[s][i] + h01 * d.y[s + 1][i] + h11 * h * d.dy[s + 1][i];
        }
    }

    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.value_in_cell(self.grid.cell_of(t), t, &mut out);
        out
    }
}

fn rhs(driver: &dyn Driver, cell: usize, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
    let mu = driver.flow().in_cell(cell, t);
    for (i, o) in out.iter_mut().enumerate() {
        *o = -driver.phi(cell, t, i, &mu, y)?;
    }
    Ok(())
}

/// Integrate a backward equation from `y(T) = h(., mu_T)` to time 0.
pub fn solve_backward(driver: &dyn Driver) -> Result<ValueField> {
    let flow = driver.flow();
    let grid = flow.grid().clone();
    let n = driver.n();
    if flow.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: flow.n() });
    }
    let cells = grid.cells();
    let mut y: Vec<f64> = (0..n).map(|i| driver.terminal(i, flow.terminal())).collect();
    let mut nodes = vec![Vec::new(); grid.nodes()];
    nodes[cells] = y.clone();
    let mut dense = Vec::with_capacity(cells);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut stage = vec![0.0; n];
    for cell in (0..cells).rev() {
        let nsub = driver.cell_substeps(cell)?;
        let (a, b) = (grid.t(cell), grid.t(cell + 1));
        let h = (b - a) / nsub as f64;
        let mut times = vec![0.0; nsub + 1];
        let mut ys = vec![Vec::new(); nsub + 1];
        let mut dys = vec![Vec::new(); nsub + 1];
        times[nsub] = b;
        ys[nsub] = y.clone();
        for s in (0..nsub).rev() {
            let t1 = if s + 1 == nsub { b } else { a + (s + 1) as f64 * h };
            let t0 = if s == 0 { a } else { a + s as f64 * h };
            let h = t1 - t0;
            // dy/dt = F(t, y); step from t1 down to t0
            rhs(driver, cell, t1, &y, &mut k1)?;
            if s + 1 == nsub {
                dys[nsub] = k1.clone();
            }
            stage.iter_mut().zip(&y).zip(&k1).for_each(|((o, y), k)| *o = y - 0.5 * h * k);
            rhs(driver, cell, t1 - 0.5 * h, &stage, &mut k2)?;
            stage.iter_mut().zip(&y).zip(&k2).for_each(|((o, y), k)| *o = y - 0.5 * h * k);
            rhs(driver, cell, t1 - 0.5 * h, &stage, &mut k3)?;
            stage.iter_mut().zip(&y).zip(&k3).for_each(|((o, y), k)| *o = y - h * k);
            rhs(driver, cell, t0, &stage, &mut k4)?;
            for i in 0..n {
                y[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if let Some(&bad) = y.iter().find(|v| !v.is_finite()) {
                return Err(Error::StepUnstable { t: t0, mass: bad });
            }
            times[s] = t0;
            ys[s] = y.clone();
            let mut d = vec![0.0; n];
            rhs(driver, cell, t0, &y, &mut d)?;
            dys[s] = d;
        }
        nodes[cell] = y.clone();
        dense.push(DenseCell { times, y: ys, dy: dys });
    }
    dense.reverse();
    Ok(ValueField { grid, support: driver.support().clone(), y: nodes, dense })
}

/// Solve the policy-frozen backward equation.
pub fn solve_bsde(driver: &PolicyDriver<'_>) -> Result<ValueField> {
    solve_backward(driver)
}

const GAUSS3: [(f64, f64); 3] =
    [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];

/// Residual of the martingale representation along one path:
///
/// `| y(T, x_T) - y(0, x_0) + int phi dt - sum_jumps z + int sum_j g_ij z_ij dt |`,
///
/// evaluated from the field's dense output. Jump terms telescope, so this is
/// `| sum_segments [y(b, i) - y(a, i) + int_a^b phi(t, i, y(t)) dt] |`.
pub fn pathwise_residual(vf: &ValueField, path: &PathSample, driver: &dyn Driver) -> Result<f64> {
    let n = vf.n();
    let substeps = vf.substeps();
    let flow = driver.flow();
    let mut buf = vec![0.0; n];
    let mut total = 0.0;
    for (i, a, b) in path.segments() {
        let mut first = true;
        for_each_piece(vf.grid(), &substeps, a, b, |cell, lo, hi| {
            if first {
                vf.value_in_cell(cell, lo, &mut buf);
                total -= buf[i];
                first = false;
            }
            let (m, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            for (x, w) in GAUSS3 {
                let t = m + r * x;
                vf.value_in_cell(cell, t, &mut buf);
                total += w * r * driver.phi(cell, t, i, &flow.in_cell(cell, t), &buf)?;
            }
            if hi >= b {
                vf.value_in_cell(cell, hi, &mut buf);
                total += buf[i];
            }
            Ok(())
        })?;
    }
    Ok(total.abs())
}

/// Outcome of [`verify_comparison`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// `min_{k,i} (y1 - y2)`.
    pub min_margin: f64,
    pub at: (usize, usize),
    pub holds: bool,
}

/// Accepted numerical undershoot in the comparison conclusion.
pub const COMPARISON_MARGIN: f64 = 1e-12;

/// Check `y1 >= y2` given ordered terminals and drivers ordered along `z2`.
///
/// Refuses to run (with `HypothesisViolated`) unless `h1 >= h2` and
/// `phi1(t_k, i, Z2) >= phi2(t_k, i, Z2)` at every grid node.
pub fn verify_comparison(
    sol1: &ValueField,
    sol2: &ValueField,
    drv1: &dyn Driver,
    drv2: &dyn Driver,
) -> Result<ComparisonReport> {
    let grid = sol1.grid();
    if grid != sol2.grid() || sol1.n() != sol2.n() {
        return Err(Error::DimensionMismatch { expected: sol1.n(), got: sol2.n() });
    }
    let n = sol1.n();
    let (f1, f2) = (drv1.flow(), drv2.flow());
    for i in 0..n {
        let (h1, h2) = (drv1.terminal(i, f1.terminal()), drv2.terminal(i, f2.terminal()));
        if !(h1 >= h2) {
            return Err(Error::HypothesisViolated(format!("terminal order fails at state {i}: {h1} < {h2}")));
        }
    }
    for k in 0..grid.nodes() {
        let cell = k.min(grid.cells() - 1);
        let t = grid.t(k);
        let (mu1, mu2) = (f1.in_cell(cell, t), f2.in_cell(cell, t));
        let y2 = sol2.node_values(k);
        for i in 0..n {
            let (p1, p2) = (drv1.phi(cell, t, i, &mu1, y2)?, drv2.phi(cell, t, i, &mu2, y2)?);
            if !(p1 >= p2) {
                return Err(Error::HypothesisViolated(format!("driver order fails at t={t}, state {i}: {p1} < {p2}")));
            }
        }
    }
    let mut min_margin = f64::INFINITY;
    let mut at = (0, 0);
    for k in 0..grid.nodes() {
        for i in 0..n {
            let m = sol1.y(k, i) - sol2.y(k, i);
            if m < min_margin {
                min_margin = m;
                at = (k, i);
            }
        }
    }
    Ok(ComparisonReport { min_margin, at, holds: min_margin >= -COMPARISON_MARGIN })
}
