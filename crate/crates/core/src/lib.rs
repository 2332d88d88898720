//! Sensitivity parameters under random covariate selection: population
//! covariance models, projection algebra, selection designs, the parameter
//! family itself, synthetic covariance structures with known limits, and
//! the enumeration / Monte Carlo machinery that characterizes the sampling
//! distributions.

pub mod cli;
pub mod cov;
pub mod design;
pub mod dgp;
pub mod engine;
pub mod error;
pub mod ingest;
pub mod limits;
pub mod params;
pub mod population;
pub mod projection;
pub mod summary;

pub use cov::CovarianceModel;
pub use design::SelectionMask;
pub use error::{Error, Result};
pub use params::ParamId;
pub use population::Population;
