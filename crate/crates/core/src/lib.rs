pub mod baselines;
pub mod bench;
pub mod checklist;
pub mod config;
pub mod data;
pub mod error;
pub mod extractors;
pub mod metrics;
pub mod pb;
pub mod run;
pub mod sweep;
pub mod train;
pub mod trees;

pub use error::{Error, Result};
