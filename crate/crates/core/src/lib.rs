//! Class-conditional image generation with conditional transferring
//! features: a transfer generator learns to lift low-quality images into
//! the high-quality domain, and the spectral differences between its
//! blocks, together with its per-class normalisation parameters, steer a
//! synthesis generator. Both generators share one discriminator.

pub mod cbn;
pub mod config;
pub mod ctf;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod selfsup;
pub mod spectral;
pub mod synthesis;
pub mod toy;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
