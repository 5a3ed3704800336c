//! Active-weight swapping engine for running transformer decoders whose
//! weights do not fit in DRAM.
//!
//! Only the input channels selected by Top-K activation sparsity are read
//! from flash. Channels for the next group of layers are preloaded while the
//! current group computes, a per-tensor frequency cache keeps hot channels
//! resident, and a cost model picks sparsity, group size and cache budget for
//! a memory limit.
//!
//! - [`model`]: reference transformer, weight formats and model container.
//! - [`sparsity`]: importance scores, Top-K masks, calibration, analyses.
//! - [`store`]: packed on-flash layout and bandwidth model.
//! - [`cache`]: contextual hot-channel cache.
//! - [`pipeline`]: the preload / on-demand decode loop.
//! - [`planner`]: cost model and parameter search.

pub mod cache;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod planner;
pub mod sparsity;
pub mod store;

pub use error::{Error, Result};
