//! Fully first-order stochastic bilevel optimization with linearly
//! constrained lower levels.
//!
//! The lower level is `min_y g(x, y)` subject to `A x − B y − b ≤ 0`. Instead
//! of differentiating through its KKT system, [`penalty`] builds a smoothed
//! penalty Lagrangian whose `x`-gradient, after an inner minimization,
//! approximates the hypergradient `∇F(x)`. [`outer`] feeds that oracle into a
//! clipped-step, block-averaged method that reaches Goldstein stationary
//! points.

pub mod error;
pub mod linalg;
pub mod lower_level;
pub mod outer;
pub mod penalty;
pub mod problem;
pub mod quadratic;
pub mod rng;
pub mod verification;
pub mod experiment;

pub use error::{Error, Result};
pub use problem::{BilevelProblem, CountingProblem, LinearConstraints, ProblemDocument, UpperSet};
pub use quadratic::QuadraticInstance;
pub use rng::NoiseStream;
