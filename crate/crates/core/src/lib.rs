//! Target- and context-modulated transformer attention for zero-shot visual
//! search, with a synthetic benchmark harness.

pub mod bench;
pub mod context;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod image;
pub mod numerics;
pub mod rng;
pub mod search;
pub mod target;
pub mod tcab;

pub use error::{Result, TctError};
