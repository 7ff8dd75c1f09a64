//! Uncertain-label correction for expression classification.
//!
//! A target branch learns per-sample confidence weights and trains a
//! class-weighted, confidence-scaled cross-entropy with a rank margin between
//! high- and low-confidence groups. An auxiliary branch predicts action units
//! through a graph convolution over a data-driven AU co-occurrence graph; its
//! AU logits act as semantic features from which class templates are built
//! and low-confidence labels are corrected.
//!
//! Everything runs on a small dense autodiff core ([`numcore`]) against
//! synthetic data ([`datagen`]) whose hidden true labels make the correction
//! step auditable.

pub mod aux_branch;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod numcore;
pub mod relabel;
pub mod target_branch;
pub mod trainer;

pub use error::{Error, Result};
