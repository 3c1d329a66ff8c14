//! Acoustic FDTD forward modelling, adjoint-state full-waveform inversion and
//! deep-unfolded speed-of-sound reconstruction for ring-array ultrasound.

pub mod adjoint;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod forward;
pub mod fwi;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod phantoms;
pub mod raster;
pub mod render;
pub mod setup;
pub mod unfold;

pub use error::{Error, Result};
