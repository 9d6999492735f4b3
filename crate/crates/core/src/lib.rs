//! Attenuation-map synthesis from degraded PET activity/attenuation volumes.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: the [`Volume3D`] container, the VVOL1 file format, intensity
//!   normalisation and Gaussian smoothing.
//! - [`tensor`]: a small reverse-mode autodiff engine over dense 5-D tensors
//!   with 3-D convolutions, resampling, the elementwise ops the network needs
//!   and an Adam optimiser.
//! - [`ournet`]: the over/under-representation network (UnNet, OvNet and the
//!   full-resolution FuNet) and its triple-supervision loss.
//! - [`ppgm`]: population-prior generation: exhaustive atlas matching followed
//!   by diffeomorphic demons registration.
//! - [`cascade`]: patch sampling, per-stage training and cascaded inference.
//! - [`phantom`]: synthetic torso phantoms, low-count degradation and atlases.
//! - [`metrics`]: PSNR, SSIM and RMSE over volumes.
//! - [`cli`]: the `pour` command line and the flat `key = value` run config.

pub mod cascade;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod ournet;
pub mod phantom;
pub mod ppgm;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Volume3D, VolumeKind};
