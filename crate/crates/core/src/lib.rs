//! Distributed multi-user uplink beamforming under residual carrier
//! frequency offsets.
//!
//! The crate models an OFDM uplink received by several distributed access
//! points (dAPs), each with its own oscillator, and provides:
//!
//! - [`ofdm`]: symbol modulation, subcarrier maps, LTS pilots, QPSK.
//! - [`cfo`]: the ICI kernel, the per-symbol CFO gain Ω and its moments.
//! - [`channel`]: Rayleigh channels and the exact and simplified uplink models.
//! - [`beamform`]: conjugate and zero-forcing combining.
//! - [`analytic`]: closed-form conditional and asymptotic SINR.
//! - [`simkit`]: the Monte Carlo engine, genie SINR and EVM.
//! - [`dataset`]: HDF5 capture ingest, LTS channel/CFO estimation, EVM-SNR.

pub mod analytic;
pub mod beamform;
pub mod cfo;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod ofdm;
pub mod seed;
pub mod simkit;

pub use error::{Error, Result};
