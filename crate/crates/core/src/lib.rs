//! Universal behavioral profile pipeline.
//!
//! End-to-end building blocks for turning raw e-commerce event logs into
//! per-user profile embeddings: ingestion and validation, handcrafted
//! features, a multi-task sequential transformer encoder, a bipartite-graph
//! embedder, a cross-network fusion model, profile assembly and linear-probe
//! evaluation. Model math is generic over the scalar type ([`Scalar`]); f32
//! is used for training and f64 for gradient verification.

pub mod config;
pub mod data;
pub mod dcn;
pub mod encoders;
pub mod error;
pub mod event;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod scalar;
pub mod seq;
pub mod twhin;

pub use error::{Error, Result};
pub use scalar::Scalar;
