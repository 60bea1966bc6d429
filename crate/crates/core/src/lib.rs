//! Text-conditioned B-rep editing workbench.
//!
//! The pipeline synthesizes paired pre/post-edit models, renders and
//! annotates them, trains a latent sequence modifier on face latents and
//! evaluates edits by primitive matching.

// `!(x > 0.0)` style checks are there to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod brep;
pub mod codec;
pub mod error;
pub mod metrics;
pub mod modifier;
pub mod pipeline;
pub mod render;
pub mod service;
pub mod synth;
pub mod validity;

pub use error::{Error, Result};
