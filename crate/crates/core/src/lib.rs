//! Control-bounded analog-to-digital conversion.
//!
//! The crate covers the whole conversion pipeline for converters whose analog
//! part is a linear state-space system kept bounded by clocked digital control:
//!
//! * [`model`] builds analog systems (notably integrator chains) and evaluates
//!   their analog transfer function matrix.
//! * [`xfer`] evaluates signal/noise transfer functions, bandwidth and the
//!   white-noise performance predictions.
//! * [`design`] computes the estimation-filter coefficients offline
//!   (Riccati solutions, discretized recursions, parallel form).
//! * [`sim`] simulates the controlled analog system and records the control
//!   trace.
//! * [`estimate`] turns a control trace into input estimates (batch, mixed
//!   IIR/FIR, fully parallel, plus a discrete-time Kalman smoother oracle).
//! * [`analyze`] measures PSD, SNR, SNDR and SFDR.
//! * [`config`] and [`io`] hold the configuration schema and file formats
//!   used by the `cbadc` command-line tool.

pub mod analyze;
pub mod config;
pub mod design;
pub mod error;
pub mod estimate;
pub mod io;
pub mod linalg;
pub mod model;
pub mod sim;
pub mod xfer;

pub use error::{Error, Result};

/// Tool version embedded in every output file header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
