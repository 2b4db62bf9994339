//! Attention over SSM-compressed key/value chunks.
//!
//! Keys and values come from two selective state-space scans that restart at
//! every chunk boundary; queries attend to the SSM output at each boundary
//! (one compressed state per chunk) plus a window of recent uncompressed
//! outputs. The crate is `no_std` and needs only `alloc`.
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, finite-difference checks
//! - [`ssm`]: the resettable selective scan
//! - [`chunking`]: boundary plans (uniform, random, cyclic, fattn, fssm)
//! - [`masks`]: training masks and inference-time visible sets
//! - [`model`]: Attamba and baseline blocks, byte-level language model
//! - [`decode`]: incremental inference over a compressed KV-cache
//! - [`cost`]: analytic FLOPs/memory model and iso-baseline solvers

#![no_std]
extern crate alloc;

pub mod chunking;
pub mod cost;
pub mod decode;
pub mod error;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod ssm;

pub use error::{Error, Result};
