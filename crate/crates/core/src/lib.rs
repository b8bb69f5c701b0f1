pub mod bench;
pub mod codec;
pub mod config;
pub mod error;
pub mod explain;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod zoo;

pub use error::{Error, Result};
