//! Spuriosity rankings over cached network features: per-class feature
//! statistics, image rankings, spurious-gap metrics, annotation aggregation,
//! head tuning and segmentation utilities.

pub mod annotation;
pub mod bias_eval;
pub mod importance;
pub mod mitigation;
pub mod scoring;
pub mod segmentation;
pub mod synthetic;
pub mod tensor_store;
