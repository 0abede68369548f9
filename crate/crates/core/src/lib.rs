//! Rigid-motion artifact simulation and correction for brain-MRI-like volumes.
//!
//! The crate is organized bottom-up:
//!
//! - [`phantom`] builds deterministic synthetic head volumes.
//! - [`volume`] holds the [`Volume`] container, the `.mvol` file format,
//!   intensity normalization and adjacent-slice triplet assembly.
//! - [`motion`] corrupts images by sampling k-space lines of rotated and
//!   phase-shifted copies of the clean image.
//! - [`metrics`] measures SSIM/MSE/PSNR and runs the severity study.
//! - [`autodiff`] is a small reverse-mode engine with exactly the primitives
//!   the correction network needs, plus Adam.
//! - [`model`] is the stacked U-Net with per-input stems and CBAM gating.
//! - [`training`] builds datasets, trains, evaluates and runs ablations.

pub mod autodiff;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod phantom;
pub mod seed;
pub mod training;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Slice, SliceTriplet, Volume};
