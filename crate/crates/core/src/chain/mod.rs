//! Finite-state foundations: state spaces, generators, probability vectors,
//! the forward equation, reference-chain sampling and moment bounds.

pub mod forward;
pub mod measure;
pub mod moments;
pub mod paths;
pub mod space;

pub use forward::{solve_forward, solve_forward_with, substeps, RateSource, SUBSTEP_RATE_RATIO};
pub use measure::{relative_entropy, tv_distance, MeasureFlow, ProbVector, TimeGrid};
pub use moments::{compute_kappa0, ExpBoundParams};
pub use paths::{counting_statistics, simulate_paths, CountingStats, Jump, PathEnsemble, PathSample};
pub use space::{validate_generator, Generator, RateMatrix, StateSpace, Support};
