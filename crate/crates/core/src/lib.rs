//! Unsupervised cross-domain retrieval by correspondence-free domain
//! alignment: an encoder trained with per-domain memory banks, multi-scale
//! clustering, in-domain self-matching and cross-domain classifier alignment.

pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod memory;
pub mod numerics;
pub mod objective;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
