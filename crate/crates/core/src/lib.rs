//! Multichannel blind source separation with a complex Gaussian mixture whose
//! components are tied to a grid of arrival directions, inferred by
//! variational EM and optionally initialized by an amortized mask network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod em;
pub mod error;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
