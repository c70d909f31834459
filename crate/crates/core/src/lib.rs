//! Behavioral simulator of a multi-bit synapse built from ferroelectric transistors and a capacitor-held LSB.
//!
//! The crate models the synapse current ladder ([`device`]), the stateful
//! pulse/transfer/decay behavior of one crosspoint ([`synapse`]), crossbar
//! readout and timing ([`crossbar`]), pulse-quantized SGD training
//! ([`trainer`]) and the command-line surface ([`io_cli`]).

pub mod crossbar;
pub mod device;
pub mod error;
pub mod io_cli;
pub mod synapse;
pub mod trainer;

pub use error::{Error, Result};
