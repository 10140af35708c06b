//! Multi-task road perception on a single shared encoder: traffic-object
//! detection, drivable-area segmentation and lane-line segmentation, trained
//! jointly or by alternating stage schedules.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`config`] — experiment configuration (flat `key: value` text format).
//! - [`data`] — dataset ingestion (native layout and a BDD-style subset),
//!   lane center-line preprocessing, resizing, augmentation, and a
//!   deterministic synthetic scene generator.
//! - [`anchors`] — k-means prior boxes under the 1−IoU distance.
//! - [`model`] — CSP backbone + SPP + FPN encoder, PAN detect head, two
//!   full-resolution segmentation heads.
//! - [`losses`] — focal, CIoU, cross-entropy and soft-IoU terms plus the
//!   weighted multi-task total.
//! - [`postprocess`] — grid decoding, NMS, logits-to-mask.
//! - [`metrics`] — detection recall / mAP50, segmentation mIoU, lane pixel
//!   accuracy and IoU, latency benchmarking.
//! - [`trainer`] — Adam with warm-up + cosine schedule, the five training
//!   paradigms via parameter-group freezing, checkpointing, evaluation.
//!
//! See the crate `examples/` directory for one runnable program per
//! capability, and the `roadnet` binary for the equivalent subcommands.

pub mod anchors;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod trainer;

pub use anchors::AnchorSet;
pub use config::{ExperimentConfig, Head, ImageSize, Paradigm};
pub use data::Sample;
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use metrics::MetricsReport;
pub use model::{Model, RawOutputs};
pub use postprocess::Detection;
