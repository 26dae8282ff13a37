//! Forward (master) equation `d mu / dt = mu^T Lambda(t)` on a time grid.
//!
//! Each grid cell is integrated with classical RK4 on equal substeps, the
//! substep count chosen so that `max exit rate * substep <= 0.1`. The state is
//! projected back to the simplex at the end of every cell.

use crate::chain::measure::{MeasureFlow, ProbVector, TimeGrid};
use crate::chain::space::RateMatrix;
use crate::error::{Error, Result};

/// Upper bound on `max exit rate * substep`.
pub const SUBSTEP_RATE_RATIO: f64 = 0.1;

const NEGATIVE_MASS_TOL: f64 = 1e-9;
const DRIFT_TOL: f64 = 1e-9;

/// Number of RK4 substeps for a cell of length `dt` at the given rate scale.
pub fn substeps(max_rate: f64, dt: f64) -> usize {
    // the epsilon keeps exact ratios like 1.6 * (1/16) from rounding up
    let k = (max_rate * dt / SUBSTEP_RATE_RATIO - 1e-9).ceil();
    if k.is_finite() && k >= 1.0 {
        k as usize
    } else {
        1
    }
}

/// Time-dependent rate matrices, piecewise on grid cells.
pub trait RateSource {
    fn n(&self) -> usize;

    /// Rate matrix in force at time `t` inside cell `cell` (diagonal included).
    fn rates(&self, cell: usize, t: f64, out: &mut RateMatrix) -> Result<()>;

    /// Substep count for `cell`, from the exit rates at the cell's start,
    /// midpoint and end.
    fn cell_substeps(&self, cell: usize, grid: &TimeGrid) -> Result<usize> {
        let (a, b) = (grid.t(cell), grid.t(cell + 1));
        let mut m = RateMatrix::zeros(self.n());
        let mut max_rate: f64 = 0.0;
        for t in [a, 0.5 * (a + b), b] {
            self.rates(cell, t, &mut m)?;
            max_rate = max_rate.max(m.max_exit_rate());
        }
        Ok(substeps(max_rate, b - a))
    }
}

/// One fixed rate matrix per grid cell.
pub struct FrozenRates<'a>(pub &'a [RateMatrix]);

impl RateSource for FrozenRates<'_> {
    fn n(&self) -> usize {
        self.0[0].n()
    }

    fn rates(&self, cell: usize, _t: f64, out: &mut RateMatrix) -> Result<()> {
        out.clone_from(&self.0[cell]);
        Ok(())
    }
}

/// Forward solve with one frozen rate matrix per cell.
pub fn solve_forward(rates: &[RateMatrix], xi: &ProbVector, grid: &TimeGrid) -> Result<MeasureFlow> {
    if rates.len() != grid.cells() {
        return Err(Error::DimensionMismatch { expected: grid.cells(), got: rates.len() });
    }
    if let Some(m) = rates.iter().find(|m| m.n() != xi.n()) {
        return Err(Error::DimensionMismatch { expected: xi.n(), got: m.n() });
    }
    solve_forward_with(&FrozenRates(rates), xi, grid)
}

/// Forward solve for an arbitrary piecewise rate source.
pub fn solve_forward_with(source: &dyn RateSource, xi: &ProbVector, grid: &TimeGrid) -> Result<MeasureFlow> {
    let n = xi.n();
    if source.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: source.n() });
    }
    let mut q = RateMatrix::zeros(n);
    let mut mu = xi.mass().to_vec();
    let mut flow = Vec::with_capacity(grid.nodes());
    flow.push(xi.clone());
    let mut stage = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);

    for cell in 0..grid.cells() {
        let a = grid.t(cell);
        let nsub = source.cell_substeps(cell, grid)?;
        let h = grid.dt(cell) / nsub as f64;
        for s in 0..nsub {
            let t = a + s as f64 * h;
            source.rates(cell, t, &mut q)?;
            q.left_mul(&mu, &mut k1);
            axpy(&mu, 0.5 * h, &k1, &mut stage);
            check_mass(&stage, t)?;
            source.rates(cell, t + 0.5 * h, &mut q)?;
            q.left_mul(&stage, &mut k2);
            axpy(&mu, 0.5 * h, &k2, &mut stage);
            check_mass(&stage, t)?;
            q.left_mul(&stage, &mut k3);
            axpy(&mu, h, &k3, &mut stage);
            check_mass(&stage, t)?;
            source.rates(cell, t + h, &mut q)?;
            q.left_mul(&stage, &mut k4);
            for j in 0..n {
                mu[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            check_mass(&mu, t + h)?;
        }
        let drift = (mu.iter().sum::<f64>() - 1.0).abs();
        if drift > DRIFT_TOL {
            return Err(Error::StepUnstable { t: grid.t(cell + 1), mass: 1.0 + drift });
        }
        let p = ProbVector::project(mu.clone());
        mu.copy_from_slice(p.mass());
        flow.push(p);
    }
    MeasureFlow::new(grid.clone(), flow)
}

/// Split `[a, b]` at the grid nodes and at each cell's equal substep nodes,
/// calling `f(cell, lo, hi)` on every piece in time order.
pub(crate) fn for_each_piece(
    grid: &TimeGrid,
    substeps: &[usize],
    a: f64,
    b: f64,
    mut f: impl FnMut(usize, f64, f64) -> Result<()>,
) -> Result<()> {
    if b <= a {
        return Ok(());
    }
    let mut cell = grid.cell_of(a);
    let mut t = a;
    while t < b {
        let (c0, c1) = (grid.t(cell), grid.t(cell + 1));
        let nsub = substeps[cell];
        let h = (c1 - c0) / nsub as f64;
        let s = (((t - c0) / h).floor() as usize).min(nsub - 1);
        let mut end = if s + 1 == nsub { c1 } else { c0 + (s + 1) as f64 * h };
        if end <= t {
            end = c1;
        }
        let end = end.min(b);
        f(cell, t, end)?;
        t = end;
        if t >= c1 {
            if cell + 1 == grid.cells() {
                break;
            }
            cell += 1;
        }
    }
    Ok(())
}

fn axpy(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for j in 0..x.len() {
        out[j] = x[j] + a * y[j];
    }
}

fn check_mass(v: &[f64], t: f64) -> Result<()> {
    match v.iter().copied().find(|&m| m < -NEGATIVE_MASS_TOL) {
        Some(mass) => Err(Error::StepUnstable { t, mass }),
        None => Ok(()),
    }
}
