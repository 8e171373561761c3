//! Desk-scale framework for multi-label class-incremental learning.
//!
//! A small CNN backbone feeds a class-activation-map head whose per-class
//! spatial masks decouple shared features into class-specific graph nodes.
//! A two-layer graph convolution over those nodes uses a learnable, block-
//! expandable general correlation matrix followed by an input-conditioned
//! specific correlation matrix. Training under task-level partial labels
//! combines new-class BCE, knowledge distillation against the pre-expansion
//! model, and a max-entropy regularizer that calibrates old-class
//! confidences. Everything runs on CPU in f64 with hand-rolled backprop.
//!
//! Module map:
//! - [`data`]: task schedules, synthetic corpus generation, manifest I/O
//! - [`model`]: backbone, CAM head, correlation matrices, GCN, expansion
//! - [`losses`]: classification + distillation loss, max-entropy term
//! - [`trainer`]: per-task training loop, optimizer, replay buffer
//! - [`metrics`]: mAP / CF1 / OF1 / FPR, histograms, per-task reports
//! - [`experiment`]: config-driven end-to-end runs and report comparison

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

// Shared numeric types; downstream crates use the same ndarray version.
pub use ndarray;
