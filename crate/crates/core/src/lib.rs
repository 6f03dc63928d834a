pub mod data;
pub mod error;
pub mod fusion;
pub mod hia;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scheduler;
pub mod seg;

pub use error::{Error, Result};
