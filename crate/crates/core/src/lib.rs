pub mod cache;
pub mod error;
pub mod grape;
pub mod linalg;
pub mod optim;
pub mod penalty;
pub mod propagator;
pub mod scalar;
pub mod spin;

pub use error::{Error, Result};
pub use scalar::Scalar;
