//! State spaces, dense rate matrices and reference generators.

use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// A finite truncation of the state space with integer labels.
///
/// States are the indices `0..n`; `label(i)` is the integer value carried by
/// state `i` and is what moment functionals such as `|x|_t` see.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSpace {
    labels: Vec<i64>,
}

impl StateSpace {
    /// States `0..n` labelled by their index.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_labels((0..n as i64).collect())
    }

    pub fn with_labels(labels: Vec<i64>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(invalid("a state space needs at least two states"));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("state labels must be strictly increasing"));
        }
        Ok(StateSpace { labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, i: usize) -> i64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// First absolute moment `sum_i |label(i)| mu_i`.
    pub fn first_moment(&self, mass: &[f64]) -> f64 {
        self.labels.iter().zip(mass).map(|(&l, &m)| (l as f64).abs() * m).sum()
    }
}

/// Set of allowed transitions `(i, j)`, `i != j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Support {
    n: usize,
    mask: Vec<bool>,
    pairs: Vec<(usize, usize)>,
}

impl Support {
    pub fn from_mask(n: usize, mut mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), n * n);
        for i in 0..n {
            mask[i * n + i] = false;
        }
        let pairs = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| mask[i * n + j]).collect();
        Support { n, mask, pairs }
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut mask = vec![false; n * n];
        for &(i, j) in pairs {
            mask[i * n + j] = true;
        }
        Self::from_mask(n, mask)
    }

    /// Every off-diagonal pair.
    pub fn complete(n: usize) -> Self {
        Self::from_mask(n, vec![true; n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.mask[i * self.n + j]
    }

    /// Pairs in row-major order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.mask[i * self.n + j])
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First pair where the two supports disagree, if any.
    pub fn first_difference(&self, other: &Support) -> Option<(usize, usize)> {
        if self.n != other.n {
            return Some((self.n.min(other.n), 0));
        }
        (0..self.n * self.n).find(|&k| self.mask[k] != other.mask[k]).map(|k| (k / self.n, k % self.n))
    }
}

/// Dense square matrix of jump rates with the diagonal set to minus the
/// off-diagonal row sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateMatrix {
    n: usize,
    data: Vec<f64>,
}

impl RateMatrix {
    pub fn zeros(n: usize) -> Self {
        RateMatrix { n, data: vec![0.0; n * n] }
    }

    /// Build from rows; diagonal entries of the input are ignored.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(invalid("rate matrix is empty"));
        }
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: row.len() });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(invalid(format!("non-finite rate at ({i}, {j})")));
                }
                if i != j {
                    m.data[i * n + j] = v;
                }
            }
        }
        m.fix_diagonal();
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Recompute every diagonal entry as minus its off-diagonal row sum.
    pub fn fix_diagonal(&mut self) {
        let n = self.n;
        for i in 0..n {
            let row = &mut self.data[i * n..(i + 1) * n];
            row[i] = 0.0;
            let s: f64 = row.iter().sum();
            row[i] = -s;
        }
    }

    /// Total exit rate of state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.get(i, i)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.n).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// `out = mu^T Q`.
    pub fn left_mul(&self, mu: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &m) in mu.iter().enumerate().take(n) {
            if m == 0.0 {
                continue;
            }
            for (o, q) in out.iter_mut().zip(self.row(i)) {
                *o += m * q;
            }
        }
    }
}

/// The reference Q-matrix `g` of the dominating chain under `P`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generator {
    rates: RateMatrix,
    support: Support,
    c2: f64,
}

impl Generator {
    pub fn rates(&self) -> &RateMatrix {
        &self.rates
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    /// Smallest positive off-diagonal rate.
    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn n(&self) -> usize {
        self.rates.n()
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates.get(i, j)
    }

    pub fn from_matrix(rates: RateMatrix) -> Result<Self> {
        validate_generator(&rates.rows())
    }
}

/// Check a raw square matrix and turn it into a [`Generator`].
///
/// Diagonal entries of the input are discarded and recomputed.
pub fn validate_generator(raw: &[Vec<f64>]) -> Result<Generator> {
    let rates = RateMatrix::from_rows(raw)?;
    let n = rates.n();
    let mut mask = vec![false; n * n];
    let mut c2 = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = rates.get(i, j);
            if v < 0.0 {
                return Err(Error::NegativeRate(i, j));
            }
            if v > 0.0 {
                mask[i * n + j] = true;
                c2 = c2.min(v);
            }
        }
    }
    let support = Support::from_mask(n, mask);
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok(Generator { rates, support, c2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_state_generator() {
        let g = validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(g.c2(), 1.0);
        assert_eq!(g.support().pairs(), &[(0, 1), (1, 0)]);
        assert_eq!(g.rate(0, 0), -1.0);
    }

    #[test]
    fn zero_matrix_has_empty_support() {
        let err = validate_generator(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert_eq!(err, Error::EmptySupport);
    }

    #[test]
    fn negative_rate_is_located() {
        let err = validate_generator(&[vec![-2.0, 2.0], vec![-1.0, 1.0]]).unwrap_err();
        assert_eq!(err, Error::NegativeRate(1, 0));
    }

    #[test]
    fn diagonal_is_recomputed() {
        let g = validate_generator(&[vec![5.0, 2.0, 1.0], vec![0.0, 0.0, 3.0], vec![1.0, 1.0, 9.0]]).unwrap();
        for i in 0..3 {
            let s: f64 = g.rates().row(i).iter().sum();
            assert!(s.abs() < 1e-12);
        }
        assert_eq!(g.c2(), 1.0);
        assert!(!g.support().contains(1, 0));
    }

    #[test]
    fn labels_must_increase() {
        assert!(StateSpace::with_labels(vec![0, 2, 1]).is_err());
        assert!(StateSpace::with_labels(vec![3]).is_err());
        let s = StateSpace::with_labels(vec![-1, 0, 4]).unwrap();
        assert_eq!(s.first_moment(&[0.5, 0.25, 0.25]), 1.5);
    }
}
