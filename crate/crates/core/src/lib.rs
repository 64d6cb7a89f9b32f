pub mod autograd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod perturb;
pub mod stability;
pub mod toyworld;
pub mod train;

pub use error::{Error, Result};
