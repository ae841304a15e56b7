//! Constructive local lemma toolkit for the variable setting.
//!
//! - [`model`]: variables, events, scopes, dependency graph, exact event probabilities.
//! - [`sampler`]: the recursive resampling algorithm with traced calls and
//!   checkers for progress, witness-forest structure and resampling randomness.
//! - [`analysis`]: the local lemma condition, the `Q_{n,i}` recurrence and its
//!   generating-function fixed point, a brute-force tree oracle, and the
//!   binomial bound chain.
//! - [`problems`]: DIMACS CNF, hypergraph 2-coloring and random instance builders.
//! - [`cli`]: the `lll` command-line front end.

pub mod analysis;
pub mod cli;
pub mod model;
pub mod problems;
pub mod sampler;

pub use model::{EventSpec, EventSystem, Rational, VariableSpec};
pub use sampler::{run, run_with, Assignment, ExecutionTrace, Outcome, RunOptions};
