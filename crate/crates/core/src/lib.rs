//! Cardiac short-axis MRI segmentation and pathology classification.
//!
//! The engine localizes each cardiac structure, segments it inside a framed
//! region at model resolution, restores it to native resolution with
//! scale-aware Gaussian smoothing, and classifies the case with a cascade of
//! four binary classifiers. Networks are pluggable backends; oracles and
//! score tables stand in for trained models.

pub mod app;
pub mod backend;
pub mod calibrate;
pub mod cascade;
pub mod dataset;
pub mod evaluate;
pub mod grid;
pub mod metrics;
pub mod mask;
pub mod nifti;
pub mod segment;

pub use cascade::{PathologyClass, Stage};
pub use dataset::{CaseRecord, Phase};
pub use grid::{Grid2D, Volume3D};
pub use mask::{BinaryMask, LabelMask, Region, Structure};
