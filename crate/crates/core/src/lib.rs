//! Shared-encoder, multi-decoder segmentation and classification.
//!
//! A single encoder feeds one decoder per segmentation task and a
//! classification head. Training draws batches from independent per-task
//! datasets and masks each sample's loss to its own task, so a decoder only
//! moves when its task is present. The crate also covers instance target
//! construction and recovery, the PQ/mPQ/AP/F1/FROC evaluation suite, and a
//! synthetic aligned multi-task data generator.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod instances;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
