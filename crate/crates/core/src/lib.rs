//! Attribute-aware next-basket recommendation with stacked self-attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense tensors and a reverse-mode tape
//! * [`data`] – baskets, attribute records, CSV ingestion, splits, synthetic data
//! * [`encoder`] – time-aware padding and branch token layouts
//! * [`attention`] – multi-head self-attention blocks and masks
//! * [`model`] – branch assembly, fusion, scoring, loss, ablation variants
//! * [`train`] – Adam, the epoch loop, checkpoints
//! * [`eval`] – ranking metrics, PopRec, reports
//! * [`cli`] – the `anda` command-line front end

pub mod attention;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
