//! Model-agnostic multilevel Markov chain Monte Carlo for Bayesian
//! inverse problems, with a built-in parallel runtime.
//!
//! The engine estimates a posterior expectation through a telescoping sum
//! over a hierarchy of models: a cheap coarse chain feeds proposals to
//! finer chains, and per-level correction terms are accumulated by
//! mergeable streaming statistics. The [`parallel`] module runs the whole
//! construction as a set of communicating roles (root, phonebook,
//! controllers with worker groups, collectors) over an in-process or
//! socket transport, with dynamic load balancing across levels.
//!
//! Reference forward models live in [`models`]; the command-line
//! front end in [`cli`].

pub mod chain;
pub mod hierarchy;
pub mod models;
pub mod multilevel;
pub mod parallel;
pub mod probability;

pub use probability::{GaussianDensity, RngStream};
