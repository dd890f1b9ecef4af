//! Visual consensus prompting for co-salient object detection.
//!
//! A frozen Mix-Transformer encoder is steered by prompts generated from the
//! embeddings of an image group. Only the prompt generators, the disperser
//! and a light prediction head are trained.

pub mod backbone;
pub mod config;
pub mod cpd;
pub mod cpg;
pub mod data;
mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod params;

pub use error::{Result, VcpError};
