//! Desk-scale two-stream action detector with an integrated, trainable
//! optical-flow front end.
//!
//! The pipeline: a learned flow network (or a classical variational
//! baseline) turns consecutive frames into a flow field; a spatial stream
//! reads the RGB frame and a temporal stream reads the flow; both feature
//! maps are fused channel-wise and a 1x1 head regresses anchor-grid boxes,
//! class scores and objectness. Everything from flow to head trains jointly
//! on one tape. Companion modules supply synthetic video data with exact
//! ground truth, staged training with checkpointing, frame-mAP evaluation,
//! and a throughput harness comparing in-process flow against an
//! external-process flow pipeline.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod flow;
pub mod params;
pub mod train;

pub use error::{Error, Result};
