//! Open-vocabulary aerial object detection in a shared vision-language
//! embedding space.
//!
//! The pipeline mines informative proposals from attention maps, augments
//! extreme-aspect boxes with square jitters, clusters base-filtered region
//! embeddings into pseudo-labelled unknown classes, trains prototypes and a
//! distillation head, and fuses distillation, prototype and objectness scores
//! into novel-class detections. [`pipeline`] wires the stages to files;
//! [`synth`] generates a planted benchmark to run them on.

pub mod attention;
pub mod config;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod io;
pub mod pipeline;
pub mod prototype;
pub mod pseudolabel;
pub mod rng;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use geometry::{BBox, Proposal, ProposalSet};
pub use pipeline::Workspace;
