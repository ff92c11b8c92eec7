//! Unsupervised domain adaptation with learnable transport terms in logit
//! space.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), the network ([`model`]), every loss term ([`losses`]),
//! synthetic domain-shift data ([`data`]) and the minimax training loop
//! ([`train`]). [`verify`] runs the oracle and gradient-check suite.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::ChattyModel;
