//! Keypoint-cloud action recognition with structured max-pooling.
//!
//! This crate treats the time-series keypoints of a video clip — human
//! skeleton joints and object contour points — as one flat point cloud and
//! classifies actions by cascaded, structure-aware max-pooling: keypoint
//! features are pooled per detected instance, instance features per frame,
//! and frame features globally. Because every reduction is a channel-wise
//! max over a set, the network is permutation-invariant over keypoints and
//! instances and never consumes tracking identities.
//!
//! The same feature extractor supports weakly supervised spatio-temporal
//! action localization: training pools instance-level features into one
//! video-level logit (so only video-level labels are needed), and inference
//! removes that final pooling to score every (frame, instance) slot with the
//! shared classifier head.
//!
//! The crate is self-contained: a small reverse-mode autodiff core
//! ([`tensor`]), a clip data model with a synthetic-motion generator and
//! detection-error injectors ([`data`]), the network itself ([`model`]),
//! the localization machinery ([`localize`]), and a deterministic training
//! loop with checkpointing ([`train`], [`optim`], [`checkpoint`]).
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! and the `skpool` binary for the file-facing command line.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod localize;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
