//! Probability vectors, time grids and marginal flows.

use serde::Serialize;

use crate::error::{invalid, Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;

/// A probability distribution on the states `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVector {
    mass: Vec<f64>,
}

impl ProbVector {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(invalid("probabilities must be finite and nonnegative"));
        }
        let s: f64 = mass.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("probabilities sum to {s}, not 1")));
        }
        Ok(ProbVector { mass })
    }

    /// Point mass at state `i`.
    pub fn dirac(n: usize, i: usize) -> Self {
        let mut mass = vec![0.0; n];
        mass[i] = 1.0;
        ProbVector { mass }
    }

    pub fn uniform(n: usize) -> Self {
        ProbVector { mass: vec![1.0 / n as f64; n] }
    }

    /// Clip tiny negatives and rescale onto the simplex.
    pub(crate) fn project(mut mass: Vec<f64>) -> Self {
        for m in mass.iter_mut() {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let s: f64 = mass.iter().sum();
        if s > 0.0 {
            mass.iter_mut().for_each(|m| *m /= s);
        }
        ProbVector { mass }
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, i: usize) -> f64 {
        self.mass[i]
    }

    /// Componentwise `(1 - w) self + w other`.
    pub fn lerp(&self, other: &ProbVector, w: f64) -> ProbVector {
        let mass = self.mass.iter().zip(&other.mass).map(|(a, b)| (1.0 - w) * a + w * b).collect();
        ProbVector { mass }
    }
}

fn check_dims(mu: &ProbVector, nu: &ProbVector) -> Result<()> {
    if mu.n() != nu.n() {
        return Err(Error::DimensionMismatch { expected: mu.n(), got: nu.n() });
    }
    Ok(())
}

/// Total variation `sum_i |mu_i - nu_i|` (values in `[0, 2]`).
pub fn tv_distance(mu: &ProbVector, nu: &ProbVector) -> Result<f64> {
    check_dims(mu, nu)?;
    Ok(mu.mass.iter().zip(&nu.mass).map(|(a, b)| (a - b).abs()).sum())
}

/// Relative entropy `sum_i mu_i ln(mu_i / nu_i)`, infinite when `mu` charges a
/// `nu`-null state.
pub fn relative_entropy(mu: &ProbVector, nu: &ProbVector) -> Result<f64> {
    check_dims(mu, nu)?;
    let mut h = 0.0;
    for (&a, &b) in mu.mass.iter().zip(&nu.mass) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        h += a * (a / b).ln();
    }
    Ok(h.max(0.0))
}

/// Strictly increasing times `0 = t_0 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("a time grid needs at least two nodes"));
        }
        if times[0] != 0.0 {
            return Err(invalid("time grids start at 0"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("grid times must be finite and strictly increasing"));
        }
        Ok(TimeGrid { times })
    }

    /// `cells` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if !(horizon > 0.0) || cells == 0 {
            return Err(invalid("uniform grid needs a positive horizon and cell count"));
        }
        let mut times: Vec<f64> = (0..=cells).map(|k| horizon * k as f64 / cells as f64).collect();
        times[cells] = horizon;
        TimeGrid::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of cells `K`.
    pub fn cells(&self) -> usize {
        self.times.len() - 1
    }

    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Cell `k` with `t_k <= t < t_{k+1}`; `t >= T` maps to the last cell.
    pub fn cell_of(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.cells() - 1)
    }

    /// Cell `k` with `t_k < t <= t_{k+1}` (the cell seen by the left limit).
    pub fn cell_of_left(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        k.saturating_sub(1).min(self.cells() - 1)
    }

    /// Grid with each cell split into `factor` equal cells.
    pub fn refine(&self, factor: usize) -> TimeGrid {
        let mut times = Vec::with_capacity(self.cells() * factor + 1);
        for k in 0..self.cells() {
            let (a, b) = (self.times[k], self.times[k + 1]);
            for s in 0..factor {
                times.push(a + (b - a) * s as f64 / factor as f64);
            }
        }
        times.push(self.horizon());
        TimeGrid { times }
    }
}

/// Marginal laws `mu_t` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureFlow {
    grid: TimeGrid,
    flow: Vec<ProbVector>,
}

impl MeasureFlow {
    pub fn new(grid: TimeGrid, flow: Vec<ProbVector>) -> Result<Self> {
        if flow.len() != grid.nodes() {
            return Err(Error::DimensionMismatch { expected: grid.nodes(), got: flow.len() });
        }
        let n = flow[0].n();
        if let Some(p) = flow.iter().find(|p| p.n() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: p.n() });
        }
        Ok(MeasureFlow { grid, flow })
    }

    /// The same law at every node.
    pub fn constant(grid: TimeGrid, mu: ProbVector) -> Self {
        let flow = vec![mu; grid.nodes()];
        MeasureFlow { grid, flow }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.flow[0].n()
    }

    pub fn at_node(&self, k: usize) -> &ProbVector {
        &self.flow[k]
    }

    pub fn nodes(&self) -> &[ProbVector] {
        &self.flow
    }

    pub fn terminal(&self) -> &ProbVector {
        self.flow.last().unwrap()
    }

    /// Linear interpolation inside cell `k` at time `t`.
    pub fn in_cell(&self, k: usize, t: f64) -> ProbVector {
        let (a, b) = (self.grid.t(k), self.grid.t(k + 1));
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        self.flow[k].lerp(&self.flow[k + 1], w)
    }

    /// Linear interpolation at an arbitrary time in `[0, T]`.
    pub fn at(&self, t: f64) -> ProbVector {
        self.in_cell(self.grid.cell_of(t), t)
    }

    /// `sup_k d(mu_k, nu_k)` over the shared grid nodes.
    pub fn sup_tv(&self, other: &MeasureFlow) -> Result<f64> {
        if self.grid.nodes() != other.grid.nodes() {
            return Err(Error::DimensionMismatch { expected: self.grid.nodes(), got: other.grid.nodes() });
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.flow.iter().zip(&other.flow) {
            m = m.max(tv_distance(a, b)?);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 2.0);
        let mu = pv(&[0.3, 0.7]);
        assert_eq!(tv_distance(&mu, &mu).unwrap(), 0.0);
        let d = tv_distance(&pv(&[0.75, 0.25]), &pv(&[0.5, 0.5])).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let mu = pv(&[0.2, 0.8]);
        assert_eq!(relative_entropy(&mu, &mu).unwrap(), 0.0);
        let h = relative_entropy(&pv(&[0.75, 0.25]), &pv(&[0.5, 0.5])).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.130812).abs() < 1e-6);
        assert_eq!(relative_entropy(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let e = tv_distance(&ProbVector::uniform(2), &ProbVector::uniform(3)).unwrap_err();
        assert_eq!(e, Error::DimensionMismatch { expected: 2, got: 3 });
        assert!(relative_entropy(&ProbVector::uniform(2), &ProbVector::uniform(3)).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    #[test]
    fn grid_cells_and_lookup() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.cells(), 4);
        assert_eq!(g.cell_of(0.0), 0);
        assert_eq!(g.cell_of(0.25), 1);
        assert_eq!(g.cell_of_left(0.25), 0);
        assert_eq!(g.cell_of(1.0), 3);
        assert_eq!(g.refine(2).cells(), 8);
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn flow_interpolation_stays_on_simplex() {
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let f = MeasureFlow::new(g, vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        let m = f.at(0.25);
        assert!((m.get(0) - 0.75).abs() < 1e-15);
        assert!((m.mass().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
