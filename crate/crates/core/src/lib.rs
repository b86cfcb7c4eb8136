//! Attention-guided anomaly synthesis on a latent diffusion backbone, and a
//! vision-language anomaly detector trained on the synthesised pairs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod trainer;
pub mod vlad;
pub mod types;

pub use error::{Error, Result};
