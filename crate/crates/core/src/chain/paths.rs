//! Exact event-driven sampling of the reference chain and per-path counting
//! statistics.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::measure::ProbVector;
use crate::chain::space::{Generator, StateSpace};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// A jump `from -> to` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub t: f64,
    pub from: usize,
    pub to: usize,
}

/// A piecewise-constant path on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSample {
    pub x0: usize,
    pub events: Vec<Jump>,
    pub horizon: f64,
}

impl PathSample {
    /// Check ordering, continuity and (optionally) support membership.
    pub fn validate(&self, gen: Option<&Generator>) -> Result<()> {
        let mut state = self.x0;
        let mut last = 0.0;
        for e in &self.events {
            if !(e.t > last && e.t <= self.horizon) {
                return Err(invalid(format!("event time {} out of order", e.t)));
            }
            if e.from != state || e.from == e.to {
                return Err(invalid(format!("event at {} is not a jump from the current state", e.t)));
            }
            if let Some(g) = gen {
                if !g.support().contains(e.from, e.to) {
                    return Err(Error::UnsupportedTransition(e.from, e.to));
                }
            }
            state = e.to;
            last = e.t;
        }
        Ok(())
    }

    pub fn terminal_state(&self) -> usize {
        self.events.last().map_or(self.x0, |e| e.to)
    }

    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.events.partition_point(|e| e.t <= t);
        if k == 0 {
            self.x0
        } else {
            self.events[k - 1].to
        }
    }

    /// Maximal `(state, start, end)` holding intervals covering `[0, T]`.
    pub fn segments(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::with_capacity(self.events.len() + 1);
        let mut state = self.x0;
        let mut start = 0.0;
        for e in &self.events {
            out.push((state, start, e.t));
            state = e.to;
            start = e.t;
        }
        if start < self.horizon {
            out.push((state, start, self.horizon));
        }
        out
    }

    /// `|x|_T = sup_{s <= T} |label(x(s))|`.
    pub fn sup_abs_label(&self, space: &StateSpace) -> i64 {
        let mut m = space.label(self.x0).abs();
        for e in &self.events {
            m = m.max(space.label(e.to).abs());
        }
        m
    }
}

/// Seeded collection of i.i.d. paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnsemble {
    pub seed: u64,
    pub horizon: f64,
    pub paths: Vec<PathSample>,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

pub(crate) fn sample_initial<R: Rng + ?Sized>(rng: &mut R, xi: &ProbVector) -> usize {
    rng::categorical(rng, xi.mass(), 1.0)
}

/// One reference path driven by its own stream.
fn sample_reference_path(gen: &Generator, xi: &ProbVector, horizon: f64, seed: u64, index: u64) -> PathSample {
    let mut r = rng::stream(seed, index);
    let mut state = sample_initial(&mut r, xi);
    let x0 = state;
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        let exit = gen.rates().exit_rate(state);
        t += rng::exponential(&mut r, exit);
        if t > horizon {
            break;
        }
        let row: Vec<f64> = (0..gen.n()).map(|j| if j == state { 0.0 } else { gen.rate(state, j) }).collect();
        let to = rng::categorical(&mut r, &row, exit);
        events.push(Jump { t, from: state, to });
        state = to;
    }
    PathSample { x0, events, horizon }
}

/// Sample `n_paths` paths of the chain with generator `gen` started from `xi`.
///
/// Path `k` uses the stream `(seed, k)`; the ensemble is identical for every
/// worker count.
pub fn simulate_paths(
    gen: &Generator,
    xi: &ProbVector,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(invalid("n_paths must be at least 1"));
    }
    if !(horizon > 0.0) {
        return Err(invalid("horizon must be positive"));
    }
    if xi.n() != gen.n() {
        return Err(Error::DimensionMismatch { expected: gen.n(), got: xi.n() });
    }
    let paths = rng::with_workers(workers, || {
        (0..n_paths as u64).into_par_iter().map(|k| sample_reference_path(gen, xi, horizon, seed, k)).collect()
    });
    Ok(PathEnsemble { seed, horizon, paths })
}

/// Jump counts `N_ij(T)` and compensators `int_0^T I_i(s) g_ij ds`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountingStats {
    n: usize,
    pub counts: Vec<f64>,
    pub compensator: Vec<f64>,
}

impl CountingStats {
    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.n + j]
    }

    pub fn compensator(&self, i: usize, j: usize) -> f64 {
        self.compensator[i * self.n + j]
    }

    /// Martingale increment `M_ij(T) = N_ij(T) - compensator_ij`.
    pub fn martingale(&self, i: usize, j: usize) -> f64 {
        self.count(i, j) - self.compensator(i, j)
    }
}

pub fn counting_statistics(path: &PathSample, gen: &Generator) -> Result<CountingStats> {
    let n = gen.n();
    let mut counts = vec![0.0; n * n];
    let mut compensator = vec![0.0; n * n];
    for e in &path.events {
        if !gen.support().contains(e.from, e.to) {
            return Err(Error::UnsupportedTransition(e.from, e.to));
        }
        counts[e.from * n + e.to] += 1.0;
    }
    for (i, a, b) in path.segments() {
        for j in gen.support().row(i) {
            compensator[i * n + j] += gen.rate(i, j) * (b - a);
        }
    }
    Ok(CountingStats { n, counts, compensator })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::space::validate_generator;
    use crate::stats::Estimate;

    fn sym2() -> Generator {
        validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap()
    }

    #[test]
    fn absorbing_start_has_no_events() {
        let g = validate_generator(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let ens = simulate_paths(&g, &ProbVector::dirac(2, 0), 5.0, 50, 3, 1).unwrap();
        assert!(ens.paths.iter().all(|p| p.events.is_empty()));
    }

    #[test]
    fn paths_are_valid_and_worker_invariant() {
        let g = sym2();
        let a = simulate_paths(&g, &ProbVector::uniform(2), 2.0, 500, 11, 1).unwrap();
        let b = simulate_paths(&g, &ProbVector::uniform(2), 2.0, 500, 11, 4).unwrap();
        assert_eq!(a, b);
        for p in &a.paths {
            p.validate(Some(&g)).unwrap();
        }
    }

    #[test]
    fn counting_single_jump() {
        let g = sym2();
        let p = PathSample { x0: 0, events: vec![Jump { t: 0.5, from: 0, to: 1 }], horizon: 1.0 };
        let c = counting_statistics(&p, &g).unwrap();
        assert_eq!(c.count(0, 1), 1.0);
        assert_eq!(c.count(1, 0), 0.0);
        assert_eq!(c.compensator(0, 1), 0.5);
        assert_eq!(c.compensator(1, 0), 0.5);
    }

    #[test]
    fn counting_zero_event_path() {
        let g = validate_generator(&[vec![0.0, 2.0, 1.0], vec![1.0, 0.0, 1.0], vec![0.5, 0.5, 0.0]]).unwrap();
        let p = PathSample { x0: 2, events: vec![], horizon: 3.0 };
        let c = counting_statistics(&p, &g).unwrap();
        assert!(c.counts.iter().all(|&x| x == 0.0));
        assert_eq!(c.compensator(2, 0), 1.5);
        assert_eq!(c.compensator(2, 1), 1.5);
        assert_eq!(c.compensator(0, 1), 0.0);
    }

    #[test]
    fn unsupported_transition_is_rejected() {
        let g = validate_generator(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let p = PathSample { x0: 0, events: vec![Jump { t: 0.1, from: 0, to: 2 }], horizon: 1.0 };
        assert_eq!(counting_statistics(&p, &g).unwrap_err(), Error::UnsupportedTransition(0, 2));
    }

    #[test]
    fn jump_count_matches_total_rate() {
        // symmetric rate-1 chain: total jump intensity is 1 at all times
        let g = sym2();
        let ens = simulate_paths(&g, &ProbVector::dirac(2, 0), 1.0, 100_000, 5, 0).unwrap();
        let jumps: Vec<f64> = ens.paths.iter().map(|p| p.events.len() as f64).collect();
        let e = Estimate::from_samples(&jumps);
        assert!(e.covers(1.0, 3.0), "{e:?}");
    }

    #[test]
    fn compensated_counts_are_centred() {
        let g = validate_generator(&[vec![0.0, 2.0, 1.0], vec![1.0, 0.0, 0.5], vec![3.0, 1.0, 0.0]]).unwrap();
        let ens = simulate_paths(&g, &ProbVector::dirac(3, 0), 1.5, 20_000, 9, 0).unwrap();
        let stats: Vec<CountingStats> = ens.paths.iter().map(|p| counting_statistics(p, &g).unwrap()).collect();
        for &(i, j) in g.support().pairs() {
            let m: Vec<f64> = stats.iter().map(|s| s.martingale(i, j)).collect();
            let e = Estimate::from_samples(&m);
            assert!(e.covers(0.0, 3.0), "M_{i}{j}: {e:?}");
        }
    }
}
