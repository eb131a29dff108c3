//! Concept-template probing of frozen vision-transformer token features.
//!
//! Token features are stored in flat binary files (see [`feature_store`]).
//! A concept template is a direction plus a threshold: either a hyperplane
//! learned with hard-negative mining, or a cosine cone fit from a handful of
//! positive examples. Templates are scored with class-balanced metrics and
//! aggregated over few-shot trials and concept categories.

pub mod error;
pub mod feature_store;
pub mod fewshot;
pub mod metrics;
pub mod par;
pub mod pools;
pub mod runner;
pub mod seed;
pub mod segmentation;
pub mod synth;
pub mod templates;

pub use error::{Error, Result};
pub use par::Execution;
