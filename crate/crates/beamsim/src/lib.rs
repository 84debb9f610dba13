//! Link-level simulator for initial beam alignment of multi-panel
//! millimeter-wave devices.
//!
//! The crate covers the full pipeline:
//!
//! - [`geometry`]: coordinate systems, device panel layouts, pose sampling
//! - [`antenna`]: element pattern, array responses, DFT codebooks, spherical
//!   coverage
//! - [`channel`]: image-method multipath tracing, channel assembly, RSS
//!   measurements, ray-dump file formats
//! - [`mlp`]: a small feed-forward network engine (dense + embedding layers,
//!   softmax cross-entropy, Adam) with exact parameter-count introspection
//! - [`selection`]: beam-pair oracle, learned candidate lists, fingerprinting
//!   and hierarchical panel-beam search baselines
//! - [`dataset`]: sample generation, stratified splits, persistence
//! - [`eval`]: misalignment probability, effective spectral efficiency,
//!   benchmark sweeps
//! - [`pipeline`]: glue that trains the selectors on generated datasets

pub mod antenna;
pub mod channel;
pub mod dataset;
mod error;
pub mod eval;
pub mod geometry;
pub mod mlp;
pub mod pipeline;
pub mod selection;

pub use error::{Error, Result};
