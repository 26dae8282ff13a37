//! Intensity models `lambda_ij(t, i, mu, u, v)`, running/terminal costs and
//! piecewise control schedules.

use serde::Serialize;

use crate::chain::forward::RateSource;
use crate::chain::measure::{MeasureFlow, ProbVector};
use crate::chain::space::{Generator, RateMatrix, StateSpace, Support};
use crate::error::{invalid, Error, Result};

/// Control values in force: `u` for the minimizer, `v` for the maximizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Controls {
    pub u: Option<f64>,
    pub v: Option<f64>,
}

impl Controls {
    pub const NONE: Controls = Controls { u: None, v: None };

    pub fn u(u: f64) -> Self {
        Controls { u: Some(u), v: None }
    }

    pub fn uv(u: f64, v: f64) -> Self {
        Controls { u: Some(u), v: Some(v) }
    }
}

/// Controls per `(cell, state)`; cell `k` covers `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSchedule {
    cells: usize,
    n: usize,
    controls: Vec<Controls>,
}

impl ControlSchedule {
    pub fn none(cells: usize, n: usize) -> Self {
        ControlSchedule { cells, n, controls: vec![Controls::NONE; cells * n] }
    }

    pub fn from_fn(cells: usize, n: usize, f: impl Fn(usize, usize) -> Controls) -> Self {
        let controls = (0..cells).flat_map(|k| (0..n).map(move |i| (k, i))).map(|(k, i)| f(k, i)).collect();
        ControlSchedule { cells, n, controls }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn at(&self, cell: usize, i: usize) -> Controls {
        self.controls[cell * self.n + i]
    }
}

/// Jump intensities of a (possibly controlled) mean-field chain.
///
/// Rates are only read on [`IntensityModel::support`]; on the support they
/// must stay at or above [`IntensityModel::floor`].
pub trait IntensityModel: Send + Sync {
    fn space(&self) -> &StateSpace;

    fn support(&self) -> &Support;

    /// The floor `c1 > 0` enforced on the support.
    fn floor(&self) -> f64;

    fn rate(&self, t: f64, i: usize, j: usize, mu: &ProbVector, c: Controls) -> f64;

    /// Declared Lipschitz constant in the measure and control arguments.
    fn lipschitz(&self) -> f64 {
        f64::NAN
    }

    fn n(&self) -> usize {
        self.space().n()
    }
}

/// Evaluate one row of rates, enforcing the floor on the support.
pub fn rate_row(
    model: &dyn IntensityModel,
    t: f64,
    i: usize,
    mu: &ProbVector,
    c: Controls,
    out: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|o| *o = 0.0);
    let floor = model.floor();
    for j in model.support().row(i) {
        let r = model.rate(t, i, j, mu, c);
        if !(r >= floor) || !r.is_finite() {
            return Err(Error::RateBelowFloor { i, j, t, rate: r, floor });
        }
        out[j] = r;
    }
    Ok(())
}

/// Full rate matrix at `(t, mu)` with per-state controls.
pub fn fill_rates(
    model: &dyn IntensityModel,
    t: f64,
    mu: &ProbVector,
    controls: impl Fn(usize) -> Controls,
    out: &mut RateMatrix,
) -> Result<()> {
    let n = model.n();
    let mut row = vec![0.0; n];
    for i in 0..n {
        rate_row(model, t, i, mu, controls(i), &mut row)?;
        for (j, &r) in row.iter().enumerate() {
            out.set(i, j, r);
        }
    }
    out.fix_diagonal();
    Ok(())
}

/// Check that a model can be tilted against the reference generator.
pub fn check_shared_support(model: &dyn IntensityModel, gen: &Generator) -> Result<()> {
    if model.n() != gen.n() {
        return Err(Error::DimensionMismatch { expected: gen.n(), got: model.n() });
    }
    match model.support().first_difference(gen.support()) {
        Some((i, j)) => Err(Error::SupportMismatch(i, j)),
        None => Ok(()),
    }
}

/// Rates of a model frozen along a given marginal flow and schedule.
pub struct ModelRates<'a> {
    pub model: &'a dyn IntensityModel,
    pub flow: &'a MeasureFlow,
    pub schedule: &'a ControlSchedule,
}

impl RateSource for ModelRates<'_> {
    fn n(&self) -> usize {
        self.model.n()
    }

    fn rates(&self, cell: usize, t: f64, out: &mut RateMatrix) -> Result<()> {
        let mu = self.flow.in_cell(cell, t);
        fill_rates(self.model, t, &mu, |i| self.schedule.at(cell, i), out)
    }
}

/// Affine model `lambda_ij = base_ij + mean_ij ||mu||_1 + ucoef_ij u + vcoef_ij v`.
///
/// `||mu||_1` is the first absolute moment under the state labels. The
/// support is every off-diagonal pair with a nonzero coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabulatedModel {
    space: StateSpace,
    support: Support,
    floor: f64,
    base: Vec<f64>,
    mean: Vec<f64>,
    ucoef: Vec<f64>,
    vcoef: Vec<f64>,
}

impl TabulatedModel {
    pub fn new(space: StateSpace, base: &[Vec<f64>], floor: f64) -> Result<Self> {
        let n = space.n();
        let base = flatten(base, n)?;
        if !(floor > 0.0) {
            return Err(invalid("rate floor must be positive"));
        }
        let mut m = TabulatedModel {
            space,
            support: Support::from_mask(n, vec![false; n * n]),
            floor,
            base,
            mean: vec![0.0; n * n],
            ucoef: vec![0.0; n * n],
            vcoef: vec![0.0; n * n],
        };
        m.refresh_support();
        Ok(m)
    }

    pub fn with_mean_coeffs(mut self, mean: &[Vec<f64>]) -> Result<Self> {
        self.mean = flatten(mean, self.space.n())?;
        self.refresh_support();
        Ok(self)
    }

    pub fn with_u_coeffs(mut self, c: &[Vec<f64>]) -> Result<Self> {
        self.ucoef = flatten(c, self.space.n())?;
        self.refresh_support();
        Ok(self)
    }

    pub fn with_v_coeffs(mut self, c: &[Vec<f64>]) -> Result<Self> {
        self.vcoef = flatten(c, self.space.n())?;
        self.refresh_support();
        Ok(self)
    }

    fn refresh_support(&mut self) {
        let n = self.space.n();
        let mask = (0..n * n)
            .map(|k| {
                k / n != k % n
                    && (self.base[k] != 0.0 || self.mean[k] != 0.0 || self.ucoef[k] != 0.0 || self.vcoef[k] != 0.0)
            })
            .collect();
        self.support = Support::from_mask(n, mask);
    }

    pub fn base(&self, i: usize, j: usize) -> f64 {
        self.base[i * self.space.n() + j]
    }

    pub fn mean_coeff(&self, i: usize, j: usize) -> f64 {
        self.mean[i * self.space.n() + j]
    }

    /// Reference generator with the model's base rates.
    pub fn base_generator(&self) -> Result<Generator> {
        let n = self.space.n();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| self.base(i, j)).collect()).collect();
        crate::chain::space::validate_generator(&rows)
    }
}

fn flatten(rows: &[Vec<f64>], n: usize) -> Result<Vec<f64>> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rows.len() });
    }
    let mut out = Vec::with_capacity(n * n);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: r.len() });
        }
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(invalid(format!("non-finite coefficient at ({i}, {j})")));
            }
            out.push(if i == j { 0.0 } else { v });
        }
    }
    Ok(out)
}

impl IntensityModel for TabulatedModel {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn support(&self) -> &Support {
        &self.support
    }

    fn floor(&self) -> f64 {
        self.floor
    }

    fn rate(&self, _t: f64, i: usize, j: usize, mu: &ProbVector, c: Controls) -> f64 {
        let k = i * self.space.n() + j;
        let mut r = self.base[k];
        if self.mean[k] != 0.0 {
            r += self.mean[k] * self.space.first_moment(mu.mass());
        }
        if let Some(u) = c.u {
            r += self.ucoef[k] * u;
        }
        if let Some(v) = c.v {
            r += self.vcoef[k] * v;
        }
        r
    }

    fn lipschitz(&self) -> f64 {
        let labels_max = self.space.labels().iter().map(|l| l.abs()).max().unwrap_or(0) as f64;
        let m = self.mean.iter().map(|x| x.abs()).fold(0.0, f64::max) * labels_max;
        let u = self.ucoef.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let v = self.vcoef.iter().map(|x| x.abs()).fold(0.0, f64::max);
        m.max(u).max(v)
    }
}

/// The reference generator viewed as an intensity model (`lambda = g`).
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    space: StateSpace,
    gen: Generator,
}

impl GeneratorModel {
    pub fn new(space: StateSpace, gen: Generator) -> Result<Self> {
        if space.n() != gen.n() {
            return Err(Error::DimensionMismatch { expected: gen.n(), got: space.n() });
        }
        Ok(GeneratorModel { space, gen })
    }
}

impl IntensityModel for GeneratorModel {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn support(&self) -> &Support {
        self.gen.support()
    }

    fn floor(&self) -> f64 {
        self.gen.c2()
    }

    fn rate(&self, _t: f64, i: usize, j: usize, _mu: &ProbVector, _c: Controls) -> f64 {
        self.gen.rate(i, j)
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }
}

type RateFn = dyn Fn(f64, usize, usize, &ProbVector, Controls) -> f64 + Send + Sync;

/// Closure-backed model.
pub struct FnModel {
    space: StateSpace,
    support: Support,
    floor: f64,
    f: Box<RateFn>,
}

impl FnModel {
    pub fn new(
        space: StateSpace,
        support: Support,
        floor: f64,
        f: impl Fn(f64, usize, usize, &ProbVector, Controls) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnModel { space, support, floor, f: Box::new(f) }
    }
}

impl IntensityModel for FnModel {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn support(&self) -> &Support {
        &self.support
    }

    fn floor(&self) -> f64 {
        self.floor
    }

    fn rate(&self, t: f64, i: usize, j: usize, mu: &ProbVector, c: Controls) -> f64 {
        (self.f)(t, i, j, mu, c)
    }
}

/// Running cost `f(t, i, mu, u, v)` and terminal cost `h(i, mu_T)`.
pub trait CostModel: Send + Sync {
    fn running(&self, t: f64, i: usize, mu: &ProbVector, c: Controls) -> f64;

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64;

    /// Declared uniform bound on `|f|` and `|h|`, if known.
    fn bound(&self) -> Option<f64> {
        None
    }
}

/// `f = a_i + qu u^2 + lu u + qv v^2 + lv v + kuv u v + m ||mu||_1`,
/// `h = b_i + mT ||mu_T||_1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticCost {
    pub space: StateSpace,
    pub state: Vec<f64>,
    pub u_quad: f64,
    pub u_lin: f64,
    pub v_quad: f64,
    pub v_lin: f64,
    pub uv: f64,
    pub mean: f64,
    pub terminal: Vec<f64>,
    pub terminal_mean: f64,
}

impl QuadraticCost {
    /// All coefficients zero.
    pub fn zero(space: StateSpace) -> Self {
        let n = space.n();
        QuadraticCost {
            space,
            state: vec![0.0; n],
            u_quad: 0.0,
            u_lin: 0.0,
            v_quad: 0.0,
            v_lin: 0.0,
            uv: 0.0,
            mean: 0.0,
            terminal: vec![0.0; n],
            terminal_mean: 0.0,
        }
    }
}

impl CostModel for QuadraticCost {
    fn running(&self, _t: f64, i: usize, mu: &ProbVector, c: Controls) -> f64 {
        let mut f = self.state[i];
        if let Some(u) = c.u {
            f += self.u_quad * u * u + self.u_lin * u;
        }
        if let Some(v) = c.v {
            f += self.v_quad * v * v + self.v_lin * v;
        }
        if let (Some(u), Some(v)) = (c.u, c.v) {
            f += self.uv * u * v;
        }
        if self.mean != 0.0 {
            f += self.mean * self.space.first_moment(mu.mass());
        }
        f
    }

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64 {
        let mut h = self.terminal[i];
        if self.terminal_mean != 0.0 {
            h += self.terminal_mean * self.space.first_moment(mu.mass());
        }
        h
    }
}

type RunningFn = dyn Fn(f64, usize, &ProbVector, Controls) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(usize, &ProbVector) -> f64 + Send + Sync;

/// Closure-backed cost.
pub struct FnCost {
    running: Box<RunningFn>,
    terminal: Box<TerminalFn>,
}

impl FnCost {
    pub fn new(
        running: impl Fn(f64, usize, &ProbVector, Controls) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(usize, &ProbVector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnCost { running: Box::new(running), terminal: Box::new(terminal) }
    }
}

impl CostModel for FnCost {
    fn running(&self, t: f64, i: usize, mu: &ProbVector, c: Controls) -> f64 {
        (self.running)(t, i, mu, c)
    }

    fn terminal(&self, i: usize, mu: &ProbVector) -> f64 {
        (self.terminal)(i, mu)
    }
}
