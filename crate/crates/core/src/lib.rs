pub mod error;
pub mod exec;
pub mod fields;
pub mod itc;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pmm;
pub mod randomization;
pub mod respondents;
pub mod rng;
pub mod synthbench;

pub use error::{Error, Result};
