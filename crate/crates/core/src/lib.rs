//! Equivariant flow-matching policies on a small synthetic manipulation bench.

pub mod bench;
pub mod config;
pub mod equivcheck;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod perception;
pub mod policy;
pub mod so3;
pub mod tape;

pub use error::{Error, Result};
