//! Cost-sensitive dynamic test ordering and diagnosis.
//!
//! A flow-based imputer completes partially observed patient records, a
//! classifier scores the completed state, and a masked PPO policy decides which
//! test panel to buy next or which diagnosis to give. Sweeping the reward
//! weights traces a Pareto front over accuracy and cost; [`oracle`] checks the
//! same construction exactly on small tabular instances.

pub mod classifier;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod env;
pub mod error;
pub mod io;
pub mod metrics;
pub mod ndgrad;
pub mod oracle;
pub mod pareto;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
