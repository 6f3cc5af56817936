//! Turn parametrized ODE systems into scored, irregularly sampled
//! multivariate time-series forecasting datasets.

pub mod dsl;
pub mod rng;
pub mod solver;
pub mod registry;
pub mod gradscore;
pub mod generator;
pub mod baseline;
pub mod io;
