//! Learning disentangled factors by aligning density cliffs with the axes.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffgraph`]: a small reverse-mode differentiation tape
//! * [`density`]: Parzen-window estimates and their derivatives
//! * [`criterion`]: the univariate, bivariate and anti-collapse loss terms
//! * [`selfcheck`]: finite-difference checks of every loss term
//! * [`synthdata`]: grid-structured latent factors and the nonlinear mixing
//! * [`trainer`]: MLP encoder and Adam
//! * [`evalkit`]: MCC, cliff-threshold detection, quantized agreement and
//!   loss-landscape sweeps
//! * [`experiment`]: the multi-seed generate/train/evaluate driver

pub mod criterion;
pub mod density;
pub mod diffgraph;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod io;
pub mod matrix;
pub mod selfcheck;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
