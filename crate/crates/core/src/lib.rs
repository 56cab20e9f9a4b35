//! Discrete-slot simulator and analysis toolkit for detector-blinding
//! attacks on a gated-APD BB84 receiver.

// Validation uses `!(x > 0.0)` throughout so NaN inputs fail closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod calibration;
pub mod countermeasure;
pub mod detector;
pub mod electrothermal;
pub mod error;
pub mod rng;
pub mod session;

pub use error::{Error, Result};
