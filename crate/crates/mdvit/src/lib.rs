//! MDViT: a fixed-size multi-domain vision transformer for binary image
//! segmentation.
//!
//! The crate provides the full training stack: a tape-based reverse-mode
//! autodiff engine over [`ndarray`], the hierarchical U-shaped transformer
//! backbone with domain adapters, auxiliary per-domain decoder peers with
//! mutual knowledge distillation, a synthetic multi-domain data generator,
//! and the training, evaluation, and checkpoint machinery that ties them
//! together. Everything runs on CPU with no external runtime.

pub mod autodiff;
pub mod aux_peers;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod domain_adapter;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod reference;
pub mod scalar;
pub mod trainer;
