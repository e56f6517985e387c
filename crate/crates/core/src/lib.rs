pub mod auction;
pub mod classic;
pub mod error;
pub mod feasible;
pub mod mechanism;
pub mod neural;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
