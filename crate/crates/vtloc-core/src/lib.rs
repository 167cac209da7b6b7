//! Unified temporal localization over video-text pairs.
//!
//! One architecture covers moment retrieval, temporal action localization and
//! action segmentation: a two-tower encoder pair produces frame and text
//! tokens, a transformer fuses them, strided convolutions build a temporal
//! feature pyramid, and weight-shared heads emit per-frame relevancy logits
//! plus start/end displacements. Decoding expands displacements into scored
//! segments and suppresses duplicates with Gaussian SoftNMS.
//!
//! The crate is `no_std`-compatible (requires `alloc`); everything here is
//! pure computation. File formats, checkpoints and the CLI live in the
//! companion `vtloc` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod decode;
pub mod encoders;
pub mod fusion;
pub mod geom;
pub mod heads;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pyramid;
pub mod rng;

pub use config::ModelConfig;
pub use geom::{temporal_iou, FrameGrid, Segment};
