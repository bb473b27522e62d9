pub mod calibrators;
pub mod dac;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod ood;

pub use error::{Error, Result};
