//! Multi-architecture multi-expert diffusion at desk scale.
//!
//! The crate is layered bottom-up: [`numerics`] (tensors and autodiff),
//! [`schedule`] (noising and reverse steps), [`blocks`] and [`iunet`]
//! (per-expert denoisers), [`experts`] (interval routing and sampling),
//! [`spectral`] (Fourier analysis), [`pipeline`] (training, data, checkpoints)
//! and [`cli`].

pub mod blocks;
pub mod cli;
pub mod error;
pub mod experts;
pub mod fraction;
pub mod iunet;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod spectral;

pub use error::{Error, Result};
