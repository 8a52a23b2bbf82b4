//! Semi-supervised segmentation with wavelet companion images and
//! bidirectional copy-paste mixing.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensorio`] holds the volume data model, the manifest format, dataset
//!   splits, cropping and a synthetic dataset generator.
//! * [`wavelet`] performs single-level DWT/IDWT and builds the
//!   low/raw/high frequency triple fed to the network.
//! * [`mixer`] generates copy-paste masks and mixes images and label maps.
//! * [`nn`] is a small reverse-mode autodiff engine for 2D/3D convolutional
//!   networks.
//! * [`xnetplus`] is the tri-encoder, tri-branch-decoder segmentation network.
//! * [`losses`] implements Dice/cross-entropy, the direction-weighted mixed
//!   losses and the branch consistency loss, each with analytic gradients.
//! * [`metrics`] computes Dice, Jaccard, 95% Hausdorff and average surface
//!   distance.
//! * [`trainer`] runs labeled pretraining, the mean-teacher loop and
//!   inference.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod nn;
pub mod tensorio;
pub mod trainer;
pub mod wavelet;
pub mod xnetplus;

pub use error::{Error, Result};
pub use tensorio::{Dataset, Volume, VolumeKind};
