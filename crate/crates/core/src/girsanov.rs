//! Doléans-Dade densities of tilted chains against the reference chain.
//!
//! For a path `x` sampled under the reference generator `g`, the density of
//! the chain with intensities `lambda` is
//!
//! ```text
//! ln L_T = sum_{jumps i->j} ln(lambda_ij / g_ij) - int_0^T sum_j (lambda_{x(s) j} - g_{x(s) j}) ds
//! ```
//!
//! with `lambda` read along the marginal flow and control schedule. Time
//! integrals are split at the forward integrator's substep nodes and each
//! piece is evaluated at its midpoint with the flow interpolated linearly.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::forward::{for_each_piece, solve_forward_with, RateSource};
use crate::chain::measure::{MeasureFlow, ProbVector, TimeGrid};
use crate::chain::paths::{sample_initial, Jump, PathEnsemble, PathSample};
use crate::chain::space::Generator;
use crate::error::{invalid, Error, Result};
use crate::model::{check_shared_support, rate_row, ControlSchedule, IntensityModel, ModelRates};
use crate::rng;
use crate::stats::{effective_sample_size, Estimate};

/// A model frozen along a flow and schedule, ready to be compared with the
/// reference generator.
pub struct TiltContext<'a> {
    pub model: &'a dyn IntensityModel,
    pub gen: &'a Generator,
    pub flow: &'a MeasureFlow,
    pub schedule: &'a ControlSchedule,
    substeps: Vec<usize>,
}

impl<'a> TiltContext<'a> {
    pub fn new(
        model: &'a dyn IntensityModel,
        gen: &'a Generator,
        flow: &'a MeasureFlow,
        schedule: &'a ControlSchedule,
    ) -> Result<Self> {
        check_shared_support(model, gen)?;
        if flow.n() != gen.n() {
            return Err(Error::DimensionMismatch { expected: gen.n(), got: flow.n() });
        }
        let grid = flow.grid();
        if schedule.cells() != grid.cells() {
            return Err(Error::DimensionMismatch { expected: grid.cells(), got: schedule.cells() });
        }
        let rates = ModelRates { model, flow, schedule };
        let substeps = (0..grid.cells()).map(|k| rates.cell_substeps(k, grid)).collect::<Result<Vec<_>>>()?;
        Ok(TiltContext { model, gen, flow, schedule, substeps })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.flow.grid()
    }

    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    /// Rates out of state `i` at time `t` inside `cell`.
    pub fn row(&self, cell: usize, t: f64, i: usize, out: &mut [f64]) -> Result<()> {
        let mu = self.flow.in_cell(cell, t);
        rate_row(self.model, t, i, &mu, self.schedule.at(cell, i), out)
    }

    /// Visit the quadrature pieces of a holding interval `[a, b]` in state
    /// `i`, calling `f(cell, state, midpoint, length)`.
    pub fn for_each_piece(
        &self,
        i: usize,
        a: f64,
        b: f64,
        mut f: impl FnMut(usize, usize, f64, f64) -> Result<()>,
    ) -> Result<()> {
        for_each_piece(self.grid(), &self.substeps, a, b, |cell, lo, hi| f(cell, i, 0.5 * (lo + hi), hi - lo))
    }

    /// `ln L_T` for one reference path.
    pub fn log_density(&self, path: &PathSample) -> Result<f64> {
        let n = self.gen.n();
        let mut row = vec![0.0; n];
        let mut log_l = 0.0;
        for e in &path.events {
            if !self.gen.support().contains(e.from, e.to) {
                return Err(Error::UnsupportedTransition(e.from, e.to));
            }
            let cell = self.grid().cell_of_left(e.t);
            self.row(cell, e.t, e.from, &mut row)?;
            log_l += (row[e.to] / self.gen.rate(e.from, e.to)).ln();
        }
        let gen_exit: Vec<f64> = (0..n).map(|i| self.gen.rates().exit_rate(i)).collect();
        for (i, a, b) in path.segments() {
            self.for_each_piece(i, a, b, |cell, i, m, len| {
                self.row(cell, m, i, &mut row)?;
                let exit: f64 = row.iter().sum();
                log_l -= (exit - gen_exit[i]) * len;
                Ok(())
            })?;
        }
        Ok(log_l)
    }

    /// Log-densities of every path, computed in parallel, kept in path order.
    pub fn log_weights(&self, ens: &PathEnsemble, workers: usize) -> Result<GirsanovWeight> {
        let log_weights = rng::with_workers(workers, || {
            ens.paths.par_iter().map(|p| self.log_density(p)).collect::<Result<Vec<f64>>>()
        })?;
        Ok(GirsanovWeight { log_weights, normalized: false })
    }
}

/// Per-path log-weights `ln L_T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GirsanovWeight {
    pub log_weights: Vec<f64>,
    pub normalized: bool,
}

impl GirsanovWeight {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Monte Carlo estimate of `E[L_T]` (should be 1 before normalization).
    pub fn mean_estimate(&self) -> Estimate {
        Estimate::from_samples(&self.weights())
    }

    /// Shift the log-weights so the weights average to one.
    pub fn normalize(&self) -> GirsanovWeight {
        let n = self.log_weights.len() as f64;
        let top = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = top + self.log_weights.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        let shift = log_sum - n.ln();
        GirsanovWeight { log_weights: self.log_weights.iter().map(|l| l - shift).collect(), normalized: true }
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights())
    }
}

/// Self-normalized weighted marginals of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReweightedFlow {
    pub flow: MeasureFlow,
    pub ess: f64,
    pub degenerate: bool,
}

/// Minimum effective sample size accepted by [`reweight_ensemble`].
pub const MIN_ESS: f64 = 10.0;

/// Weighted empirical marginals at each grid time; reports, but does not
/// reject, degenerate weights.
pub fn reweight_ensemble_unchecked(
    ens: &PathEnsemble,
    weights: &GirsanovWeight,
    grid: &TimeGrid,
    n: usize,
) -> Result<ReweightedFlow> {
    if weights.log_weights.len() != ens.len() {
        return Err(Error::DimensionMismatch { expected: ens.len(), got: weights.log_weights.len() });
    }
    let w = weights.weights();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights { ess: 0.0 });
    }
    let mut masses = vec![vec![0.0; n]; grid.nodes()];
    for (p, &wp) in ens.paths.iter().zip(&w) {
        if wp == 0.0 {
            continue;
        }
        for (k, &t) in grid.times().iter().enumerate() {
            masses[k][p.state_at(t)] += wp / total;
        }
    }
    let flow = masses.into_iter().map(ProbVector::project).collect();
    let ess = effective_sample_size(&w);
    Ok(ReweightedFlow { flow: MeasureFlow::new(grid.clone(), flow)?, ess, degenerate: ess < MIN_ESS })
}

/// As [`reweight_ensemble_unchecked`], failing when the effective sample size
/// drops below [`MIN_ESS`].
pub fn reweight_ensemble(
    ens: &PathEnsemble,
    weights: &GirsanovWeight,
    grid: &TimeGrid,
    n: usize,
) -> Result<ReweightedFlow> {
    let r = reweight_ensemble_unchecked(ens, weights, grid, n)?;
    if r.degenerate {
        return Err(Error::DegenerateWeights { ess: r.ess });
    }
    Ok(r)
}

/// `tau(x) = x ln x - x + 1`.
pub fn tau(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x * x.ln() - x + 1.0
    }
}

/// Entropy integrand `sum_j tau(a_j) - tau(b_j) - (a_j - b_j) ln b_j` over a row.
fn entropy_density(a: &[f64], b: &[f64], support: impl Iterator<Item = usize>) -> f64 {
    support.map(|j| tau(a[j]) - tau(b[j]) - (a[j] - b[j]) * b[j].ln()).sum()
}

fn check_pair(a: &TiltContext<'_>, b: &TiltContext<'_>) -> Result<()> {
    if let Some((i, j)) = a.model.support().first_difference(b.model.support()) {
        return Err(Error::SupportMismatch(i, j));
    }
    if a.grid() != b.grid() {
        return Err(invalid("models must share a time grid"));
    }
    Ok(())
}

/// Monte Carlo relative entropy `H(P^A | P^B)` from paths sampled under `A`.
pub fn path_relative_entropy(
    a: &TiltContext<'_>,
    b: &TiltContext<'_>,
    ens_a: &PathEnsemble,
    workers: usize,
) -> Result<Estimate> {
    check_pair(a, b)?;
    let n = a.gen.n();
    let samples = rng::with_workers(workers, || {
        ens_a
            .paths
            .par_iter()
            .map(|p| {
                let (mut ra, mut rb) = (vec![0.0; n], vec![0.0; n]);
                let mut h = 0.0;
                for (i, s, e) in p.segments() {
                    a.for_each_piece(i, s, e, |cell, i, m, len| {
                        a.row(cell, m, i, &mut ra)?;
                        b.row(cell, m, i, &mut rb)?;
                        h += entropy_density(&ra, &rb, a.model.support().row(i)) * len;
                        Ok(())
                    })?;
                }
                Ok(h)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(Estimate::from_samples(&samples))
}

/// Relative entropy of the chain driven by `a` against the chain driven by
/// `b`, integrated against the marginal law `marginal` of the `a`-chain by
/// Simpson's rule on each of `a`'s forward substeps.
pub fn flow_relative_entropy(a: &ModelRates<'_>, b: &ModelRates<'_>, marginal: &MeasureFlow) -> Result<f64> {
    if let Some((i, j)) = a.model.support().first_difference(b.model.support()) {
        return Err(Error::SupportMismatch(i, j));
    }
    let grid = marginal.grid();
    if a.flow.grid() != grid || b.flow.grid() != grid {
        return Err(invalid("models must share a time grid"));
    }
    let n = a.model.n();
    let (mut ra, mut rb) = (vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0;
    for cell in 0..grid.cells() {
        let nsub = a.cell_substeps(cell, grid)?;
        let h = grid.dt(cell) / nsub as f64;
        for s in 0..nsub {
            let t0 = grid.t(cell) + s as f64 * h;
            let mut piece = 0.0;
            for (t, w) in [(t0, 1.0), (t0 + 0.5 * h, 4.0), (t0 + h, 1.0)] {
                let mu = marginal.in_cell(cell, t);
                let (mu_a, mu_b) = (a.flow.in_cell(cell, t), b.flow.in_cell(cell, t));
                let mut dens = 0.0;
                for i in 0..n {
                    if mu.get(i) == 0.0 {
                        continue;
                    }
                    rate_row(a.model, t, i, &mu_a, a.schedule.at(cell, i), &mut ra)?;
                    rate_row(b.model, t, i, &mu_b, b.schedule.at(cell, i), &mut rb)?;
                    dens += mu.get(i) * entropy_density(&ra, &rb, a.model.support().row(i));
                }
                piece += w * dens;
            }
            total += piece * h / 6.0;
        }
    }
    Ok(total.max(0.0))
}

/// Deterministic counterpart of [`path_relative_entropy`]: the `A`-marginal is
/// obtained by a forward solve started from `A`'s flow at time 0.
pub fn path_relative_entropy_from_flow(a: &TiltContext<'_>, b: &TiltContext<'_>) -> Result<f64> {
    check_pair(a, b)?;
    let ra = ModelRates { model: a.model, flow: a.flow, schedule: a.schedule };
    let rb = ModelRates { model: b.model, flow: b.flow, schedule: b.schedule };
    let marginal = solve_forward_with(&ra, a.flow.at_node(0), a.grid())?;
    flow_relative_entropy(&ra, &rb, &marginal)
}

/// Monte Carlo estimate of `E[L_T^2]` from unnormalized weights.
pub fn density_l2_diagnostic(weights: &GirsanovWeight) -> Estimate {
    let sq: Vec<f64> = weights.log_weights.iter().map(|l| (2.0 * l).exp()).collect();
    Estimate::from_samples(&sq)
}

/// Entropy, total variation and Hellinger diagnostics for a pair of tilted
/// laws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub kl_path: f64,
    pub kl_se: f64,
    pub tv_bound: f64,
    pub tv_empirical: f64,
    pub tv_se: f64,
    pub hellinger: f64,
    pub hellinger_sq_se: f64,
    pub l2_density_bound: f64,
    pub l2_density_se: f64,
}

impl EntropyReport {
    /// Standard error of `tv^2 - 2 kl` by the delta method.
    pub fn ckp_combined_se(&self) -> f64 {
        ((2.0 * self.tv_empirical * self.tv_se).powi(2) + (2.0 * self.kl_se).powi(2)).sqrt()
    }

    /// `tv^2 <= 2 kl + k * combined SE`.
    pub fn ckp_holds(&self, k: f64) -> bool {
        self.tv_empirical.powi(2) <= 2.0 * self.kl_path + k * self.ckp_combined_se()
    }

    /// `hellinger^2 <= 2 tv + k * SE`.
    pub fn hellinger_tv_holds(&self, k: f64) -> bool {
        self.hellinger.powi(2) <= 2.0 * self.tv_empirical + k * (self.hellinger_sq_se + 2.0 * self.tv_se)
    }
}

/// Build an [`EntropyReport`] for `P^A` against `P^B`.
///
/// `ens_ref` is sampled under the reference chain and `ens_a` under `A`.
pub fn entropy_report(
    a: &TiltContext<'_>,
    b: &TiltContext<'_>,
    ens_ref: &PathEnsemble,
    ens_a: &PathEnsemble,
    workers: usize,
) -> Result<EntropyReport> {
    let kl = path_relative_entropy(a, b, ens_a, workers)?;
    let la = a.log_weights(ens_ref, workers)?;
    let lb = b.log_weights(ens_ref, workers)?;
    let wa = la.weights();
    let wb = lb.weights();
    let tv: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| (x - y).abs()).collect();
    let hel: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).collect();
    let tv = Estimate::from_samples(&tv);
    let hel = Estimate::from_samples(&hel);
    let l2 = density_l2_diagnostic(&la);
    let kl_path = kl.mean.max(0.0);
    Ok(EntropyReport {
        kl_path,
        kl_se: kl.se,
        tv_bound: (2.0 * kl_path).sqrt(),
        tv_empirical: tv.mean,
        tv_se: tv.se,
        hellinger: hel.mean.sqrt(),
        hellinger_sq_se: hel.se,
        l2_density_bound: l2.mean,
        l2_density_se: l2.se,
    })
}

const THINNING_SAFETY: f64 = 1.1;

/// Sample paths directly under a model frozen along `flow` by thinning
/// against a per-`(cell, state)` bound on the exit rate.
pub fn simulate_tilted_paths(
    model: &dyn IntensityModel,
    flow: &MeasureFlow,
    schedule: &ControlSchedule,
    xi: &ProbVector,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(invalid("n_paths must be at least 1"));
    }
    let n = model.n();
    let grid = flow.grid();
    let mut row = vec![0.0; n];
    let mut bounds = vec![0.0; grid.cells() * n];
    for cell in 0..grid.cells() {
        let (a, b) = (grid.t(cell), grid.t(cell + 1));
        for i in 0..n {
            let mut m: f64 = 0.0;
            for s in 0..=4 {
                let t = a + (b - a) * s as f64 / 4.0;
                let mu = flow.in_cell(cell, t);
                rate_row(model, t, i, &mu, schedule.at(cell, i), &mut row)?;
                m = m.max(row.iter().sum());
            }
            bounds[cell * n + i] = m * THINNING_SAFETY;
        }
    }
    let horizon = grid.horizon();
    let paths = rng::with_workers(workers, || {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|k| {
                let mut r = rng::stream(seed, k);
                let mut state = sample_initial(&mut r, xi);
                let x0 = state;
                let mut t = 0.0;
                let mut cell = 0;
                let mut events = Vec::new();
                let mut row = vec![0.0; n];
                loop {
                    let bound = bounds[cell * n + state];
                    let cand = t + rng::exponential(&mut r, bound);
                    let end = grid.t(cell + 1);
                    if cand >= end {
                        if cell + 1 == grid.cells() {
                            break;
                        }
                        t = end;
                        cell += 1;
                        continue;
                    }
                    t = cand;
                    let mu = flow.in_cell(cell, t);
                    rate_row(model, t, state, &mu, schedule.at(cell, state), &mut row)?;
                    let exit: f64 = row.iter().sum();
                    if exit > bound {
                        return Err(invalid(format!("thinning bound exceeded at t={t}")));
                    }
                    if r.gen::<f64>() * bound < exit {
                        let to = rng::categorical(&mut r, &row, exit);
                        events.push(Jump { t, from: state, to });
                        state = to;
                    }
                }
                Ok(PathSample { x0, events, horizon })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(PathEnsemble { seed, horizon, paths })
}
