//! Core of the ViewFormer view-synthesis pipeline.
//!
//! Everything in this crate is pure computation over `alloc` containers: a
//! small reverse-mode autodiff engine ([`tape`]), the block-causal and
//! branching attention kernels ([`attention`]), the VQ codebook
//! ([`codebook`]), the transformer ([`model`]), pose algebra ([`pose`]) and a
//! procedural polycube renderer ([`scene`]). File formats, IO and the CLI live
//! in the `viewformer` crate.
//!
//! The crate builds without `std`. Enabling the `std` feature only turns on
//! runtime SIMD detection in the matrix-multiply backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod codebook;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pose;
pub mod real;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
