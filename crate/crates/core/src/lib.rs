//! Illumination-robust camera localization against a synthetic feature
//! database.
//!
//! Real descriptors are mapped into the synthetic domain by a learned
//! transform, classified against synthetic feature clusters with a random
//! forest and turned into a pose with RANSAC-PnP.

pub mod correspondence;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod localizer;
pub mod matcher;
pub mod par;
pub mod pipeline;
pub mod restnet;
pub mod scene;
pub mod seed;

pub use error::{Error, Result};
