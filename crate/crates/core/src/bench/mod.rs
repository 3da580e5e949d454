//! Synthetic scenes, baselines, ablations and metrics.

mod manifest;
mod metrics;
mod report;
mod scene;
mod suite;

pub use manifest::*;
pub use metrics::*;
pub use report::*;
pub use scene::*;
pub use suite::*;
