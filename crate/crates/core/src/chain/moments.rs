use serde::Serialize;

use crate::chain::measure::ProbVector;
use crate::chain::space::{Generator, StateSpace};
use crate::error::{invalid, Error, Result};

/// Default cap on `ln kappa0` before the bound is reported as an overflow.
pub const DEFAULT_LOG_CAP: f64 = 700.0;

/// Exponential-moment bound `E[exp(alpha/2 |x|_T)] <= kappa0` under the
/// reference chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpBoundParams {
    pub alpha: f64,
    pub kappa0: f64,
    pub log_kappa0: f64,
}

/// `kappa0 = E[e^{alpha x(0)}]^{1/2} exp(1/2 sum_{i != j} (e^{alpha |l_j - l_i|} - 1) g_ij T)`.
pub fn compute_kappa0(
    gen: &Generator,
    space: &StateSpace,
    xi: &ProbVector,
    horizon: f64,
    alpha: f64,
    log_cap: f64,
) -> Result<ExpBoundParams> {
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    if space.n() != gen.n() || xi.n() != gen.n() {
        return Err(Error::DimensionMismatch { expected: gen.n(), got: space.n().min(xi.n()) });
    }
    // log E[e^{alpha x(0)}] via log-sum-exp
    let terms: Vec<f64> =
        (0..xi.n()).filter(|&i| xi.get(i) > 0.0).map(|i| alpha * space.label(i) as f64 + xi.get(i).ln()).collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mgf = top + terms.iter().map(|x| (x - top).exp()).sum::<f64>().ln();

    let mut poisson = 0.0;
    for &(i, j) in gen.support().pairs() {
        let jump = (space.label(j) - space.label(i)).abs() as f64;
        poisson += (alpha * jump).exp_m1() * gen.rate(i, j) * horizon;
    }
    let log_kappa0 = 0.5 * log_mgf + 0.5 * poisson;
    if !log_kappa0.is_finite() || log_kappa0 > log_cap {
        return Err(Error::Overflow { exponent: log_kappa0, cap: log_cap });
    }
    Ok(ExpBoundParams { alpha, kappa0: log_kappa0.exp(), log_kappa0 })
}
