//! Physics-encoded spatio-temporal GAN for 4x super-resolution of single-channel satellite
//! image sequences.
//!
//! The generator encodes a nearest-neighbor-upsampled LR triplet, runs a physics branch
//! ([`phycell`]) whose filters are constrained to act as differential operators
//! ([`phys_operators`]) next to an unconstrained ConvLSTM texture branch, fuses both at the
//! center frame and decodes the SR image. Training pits it against a spatial and a temporal
//! critic ([`discriminators`]) under the hybrid objective in [`losses`].

pub mod data;
pub mod discriminators;
pub mod error;
pub mod generator;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phycell;
pub mod phys_operators;

pub use error::{Error, Result};
