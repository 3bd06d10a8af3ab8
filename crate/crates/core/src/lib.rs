pub mod acquisition;
pub mod domain;
pub mod error;
pub mod gp;
pub mod hyperfit;
pub mod oracle;
pub mod app;
pub mod policy_eval;
pub mod replica;
pub mod strategy;
pub mod synth;

pub use domain::{Bounds, Dataset, Interval, Population, Region};
pub use error::{Error, Result};
