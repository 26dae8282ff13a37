//! Mean-field fixed points by Picard iteration on the marginal flow, the
//! interacting particle system, and the mean-field Schlögl model.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::forward::solve_forward_with;
use crate::chain::measure::{tv_distance, MeasureFlow, ProbVector, TimeGrid};
use crate::chain::space::{StateSpace, Support};
use crate::error::{invalid, Error, Result};
use crate::girsanov::flow_relative_entropy;
use crate::model::{rate_row, ControlSchedule, IntensityModel, ModelRates, TabulatedModel};
use crate::rng;

/// Stopping rule and starting point for [`picard_fixed_point`].
#[derive(Debug, Clone, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting flow; defaults to the initial law held constant.
    pub initial: Option<MeasureFlow>,
    /// Record the relative entropy between consecutive iterates' path laws.
    pub entropy: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-10, max_iter: 50, initial: None, entropy: true }
    }
}

/// Outcome of a Picard run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointResult {
    pub flow: MeasureFlow,
    pub iterations: usize,
    /// `gaps[k-1] = sup_t d(mu^k_t, mu^{k-1}_t)`.
    pub gaps: Vec<f64>,
    /// Relative entropy of the `k`-th against the `(k-1)`-th iterate's path
    /// law; absent for the first iterate.
    pub entropy_gaps: Vec<Option<f64>>,
    pub converged: bool,
}

impl FixedPointResult {
    /// `sqrt(2 H)` bounds on the total variation gap.
    pub fn ckp_bounds(&self) -> Vec<Option<f64>> {
        self.entropy_gaps.iter().map(|h| h.map(|h| (2.0 * h).sqrt())).collect()
    }
}

/// Run Picard iteration `mu^{k+1} = Forward(lambda(., mu^k))` and report the
/// history whether or not it converges.
pub fn picard_iterate(
    model: &dyn IntensityModel,
    xi: &ProbVector,
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    opts: &PicardOptions,
) -> Result<FixedPointResult> {
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if xi.n() != model.n() {
        return Err(Error::DimensionMismatch { expected: model.n(), got: xi.n() });
    }
    if schedule.cells() != grid.cells() {
        return Err(Error::DimensionMismatch { expected: grid.cells(), got: schedule.cells() });
    }
    let mut prev = match &opts.initial {
        Some(f) => {
            if f.grid() != grid || f.n() != xi.n() {
                return Err(invalid("initial flow must live on the solver grid"));
            }
            f.clone()
        }
        None => MeasureFlow::constant(grid.clone(), xi.clone()),
    };
    // the flow fed into the previous iterate, kept for the entropy gap
    let mut prev_input: Option<MeasureFlow> = None;
    let mut gaps = Vec::new();
    let mut entropy_gaps = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let rates = ModelRates { model, flow: &prev, schedule };
        let next = solve_forward_with(&rates, xi, grid)?;
        let gap = next.sup_tv(&prev)?;
        let h = match (&prev_input, opts.entropy) {
            (Some(old), true) => {
                let before = ModelRates { model, flow: old, schedule };
                Some(flow_relative_entropy(&rates, &before, &next)?)
            }
            _ => None,
        };
        gaps.push(gap);
        entropy_gaps.push(h);
        prev_input = Some(std::mem::replace(&mut prev, next));
        if gap <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPointResult { flow: prev, iterations: gaps.len(), gaps, entropy_gaps, converged })
}

/// As [`picard_iterate`], failing with the gap history when the tolerance is
/// not reached.
pub fn picard_fixed_point(
    model: &dyn IntensityModel,
    xi: &ProbVector,
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    opts: &PicardOptions,
) -> Result<FixedPointResult> {
    let r = picard_iterate(model, xi, grid, schedule, opts)?;
    if !r.converged {
        return Err(Error::NotConverged {
            gaps: r.gaps,
            detail: format!("Picard gap above {} after {} iterations", opts.tol, opts.max_iter),
        });
    }
    Ok(r)
}

/// Sup-distance moved by one more forward pass from `flow`.
pub fn fixed_point_residual(model: &dyn IntensityModel, flow: &MeasureFlow, schedule: &ControlSchedule) -> Result<f64> {
    let rates = ModelRates { model, flow, schedule };
    let again = solve_forward_with(&rates, flow.at_node(0), flow.grid())?;
    again.sup_tv(flow)
}

/// Simulate `n_particles` chains interacting through their empirical law.
///
/// Particles are tracked by occupation counts; all rates are refreshed after
/// every jump and at every grid time. The returned flow holds the empirical
/// law at the grid times. Initial states are drawn i.i.d. from `xi`.
pub fn particle_system(
    model: &dyn IntensityModel,
    xi: &ProbVector,
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    n_particles: usize,
    seed: u64,
) -> Result<MeasureFlow> {
    if n_particles == 0 {
        return Err(invalid("at least one particle is needed"));
    }
    let n = model.n();
    if xi.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: xi.n() });
    }
    let mut r = rng::stream(seed, 0);
    let mut counts = vec![0usize; n];
    for _ in 0..n_particles {
        counts[rng::categorical(&mut r, xi.mass(), 1.0)] += 1;
    }
    let scale = 1.0 / n_particles as f64;
    let empirical = |c: &[usize]| ProbVector::project(c.iter().map(|&k| k as f64 * scale).collect());
    let mut out = vec![empirical(&counts)];
    let mut row = vec![0.0; n];
    let mut rates = vec![0.0; n * n];
    let mut t = 0.0;
    for cell in 0..grid.cells() {
        let end = grid.t(cell + 1);
        loop {
            let mu = empirical(&counts);
            let mut total = 0.0;
            for i in 0..n {
                if counts[i] == 0 {
                    rates[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                rate_row(model, t, i, &mu, schedule.at(cell, i), &mut row)?;
                for j in 0..n {
                    rates[i * n + j] = counts[i] as f64 * row[j];
                    total += rates[i * n + j];
                }
            }
            let next = t + rng::exponential(&mut r, total);
            if next >= end {
                t = end;
                break;
            }
            t = next;
            let k = rng::categorical(&mut r, &rates, total);
            counts[k / n] -= 1;
            counts[k % n] += 1;
        }
        out.push(empirical(&counts));
    }
    MeasureFlow::new(grid.clone(), out)
}

/// Independent particle-system replicates, one per seed, run in
/// parallel and returned in replicate order.
pub fn particle_replicates(
    model: &dyn IntensityModel,
    xi: &ProbVector,
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    n_particles: usize,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<MeasureFlow>> {
    rng::with_workers(workers, || {
        seeds.par_iter().map(|&s| particle_system(model, xi, grid, schedule, n_particles, s)).collect()
    })
}

/// Median over replicates of `d(empirical_T, target)`.
pub fn median_terminal_distance(runs: &[MeasureFlow], target: &ProbVector) -> Result<f64> {
    let d = runs.iter().map(|f| tv_distance(f.terminal(), target)).collect::<Result<Vec<f64>>>()?;
    Ok(crate::stats::median(&d))
}

/// The mean-field Schlögl model on a truncation with labels `0..n`.
///
/// `nu` is a banded Q-matrix (`nu_ij = 0` for `|i - j| >= band`); the upward
/// rate becomes `nu_{i,i+1} + ||mu||_1` and no upward move leaves the top
/// state. The support is the band and the floor is the smallest band rate.
pub fn schlogl_model(nu: &[Vec<f64>], band: usize) -> Result<TabulatedModel> {
    let n = nu.len();
    let space = StateSpace::new(n)?;
    if band == 0 {
        return Err(invalid("band width must be at least 1"));
    }
    for (i, row) in nu.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: row.len() });
        }
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if v < 0.0 {
                return Err(Error::NegativeRate(i, j));
            }
            if v != 0.0 && i.abs_diff(j) >= band {
                return Err(Error::BandViolation(i, j));
            }
        }
        if i + 1 < n && !(row[i + 1] > 0.0) {
            return Err(invalid(format!("upward rate nu_({i},{}) must be positive", i + 1)));
        }
    }
    let floor = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && nu[i][j] > 0.0)
        .map(|(i, j)| nu[i][j])
        .fold(f64::INFINITY, f64::min);
    let mean: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if j == i + 1 { 1.0 } else { 0.0 }).collect()).collect();
    TabulatedModel::new(space, nu, floor)?.with_mean_coeffs(&mean)
}

/// Birth-death `nu` with constant up and down rates.
pub fn birth_death_rates(n: usize, up: f64, down: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if j == i + 1 {
                        up
                    } else if i > 0 && j == i - 1 {
                        down
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// `max_k d(mu_{t_{k+1}}, mu_{t_k}) / (t_{k+1} - t_k)`.
pub fn marginal_modulus(flow: &MeasureFlow) -> Result<f64> {
    let grid = flow.grid();
    let mut m: f64 = 0.0;
    for k in 0..grid.cells() {
        m = m.max(tv_distance(flow.at_node(k + 1), flow.at_node(k))? / grid.dt(k));
    }
    Ok(m)
}

/// `2 sup exit rate`, taken over the flow's nodes and over point masses (the
/// latter standing in for the second-moment term with the largest label).
pub fn marginal_rate_bound(model: &dyn IntensityModel, flow: &MeasureFlow, schedule: &ControlSchedule) -> Result<f64> {
    let n = model.n();
    let grid = flow.grid();
    let mut row = vec![0.0; n];
    let mut m: f64 = 0.0;
    let diracs: Vec<ProbVector> = (0..n).map(|i| ProbVector::dirac(n, i)).collect();
    for cell in 0..grid.cells() {
        for t in [grid.t(cell), grid.t(cell + 1)] {
            let here = flow.in_cell(cell, t);
            for mu in std::iter::once(&here).chain(diracs.iter()) {
                for i in 0..n {
                    rate_row(model, t, i, mu, schedule.at(cell, i), &mut row)?;
                    m = m.max(row.iter().sum());
                }
            }
        }
    }
    Ok(2.0 * m)
}

/// Support of a banded model, exposed for configuration checks.
pub fn band_support(n: usize, band: usize) -> Support {
    let mask = (0..n * n).map(|k| k / n != k % n && (k / n).abs_diff(k % n) < band).collect();
    Support::from_mask(n, mask)
}

/// Draw a random law on `n` states (Dirichlet(1) via exponentials).
pub fn random_law<R: Rng + ?Sized>(r: &mut R, n: usize) -> ProbVector {
    let e: Vec<f64> = (0..n).map(|_| rng::exponential(r, 1.0)).collect();
    ProbVector::project(e)
}
