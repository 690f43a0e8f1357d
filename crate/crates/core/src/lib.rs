pub mod cli;
pub mod error;
pub mod estimator;
pub mod fixed_p;
pub mod high_dim;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod oracles;
pub mod parallel;
pub mod planner;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
