//! Object-centric attention head selection for Vision Transformers.
//!
//! The pipeline reads per-head Q/K/V patch tokens from activation dumps,
//! turns each head into a patch self-similarity map, clusters heads to find
//! the object-centric group, and runs a normalized cut on the aggregated map
//! to localize the object. A guided decoder for recorded logit streams and
//! the usual evaluation metrics sit alongside.

pub mod config;
pub mod decoding;
pub mod discovery;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod similarity;
pub mod spectral;
pub mod store;
pub mod synthetic;
pub mod tensor;

pub use config::{AffinityScale, PipelineConfig};
pub use error::{Error, Result};
pub use heads::{HeadId, HeadSelection};
pub use store::{ActivationDump, Component, DumpHeader, PlantedGroundTruth};
pub use tensor::Matrix;
