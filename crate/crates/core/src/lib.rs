//! Mean-field Markov jump processes on finite state spaces.
//!
//! The crate builds the marginal law of a McKean–Vlasov chain as the fixed
//! point of a Girsanov-tilted reference chain, solves the associated Markov
//! chain BSDEs, and computes optimal feedback controls and zero-sum saddle
//! points by pointwise Hamiltonian optimization.
//!
//! Layout:
//! - [`chain`]: state spaces, generators, metrics, forward equation, sampling
//! - [`model`]: intensity models, costs and control schedules
//! - [`girsanov`]: path densities, reweighting, entropy diagnostics
//! - [`mean_field`]: Picard fixed point, particle systems, the Schlögl model
//! - [`bsde`]: backward value fields and comparison checks
//! - [`control`]: Hamiltonians, policy iteration, brute-force oracle
//! - [`game`]: lower/upper Hamiltonians, Isaacs check, saddle verification
//! - [`export`]: CSV writers with a fixed numeric format

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod chain;
pub mod control;
pub mod error;
pub mod export;
pub mod game;
pub mod girsanov;
pub mod mean_field;
pub mod model;
pub mod rng;
pub mod stats;

pub use error::{Error, ErrorFamily, Result};
