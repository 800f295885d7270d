//! MKPNet: multi-tier knowledge projection between event relation extraction
//! (ERE) and discourse relation recognition (DRR).
//!
//! The two tasks share a mini-transformer token encoder, a VAE semantic
//! adaptor, and a 4-way coarse relation classifier; each task keeps its own
//! fine-grained classifier and label embeddings. Training alternates
//! mini-batches between the tasks so the shared components carry knowledge
//! across. Everything runs on [`tensorgrad`], a small deterministic
//! reverse-mode autodiff engine.

pub mod coarse;
pub mod config;
pub mod data;
pub mod encoder;
pub mod enrich;
pub mod error;
pub mod evalx;
pub mod model;
pub mod semantic;
pub mod tensorgrad;
pub mod trainer;

pub use error::{Error, Result};
