//! Multi-view contrastive world models with product-of-experts latent fusion.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff engine, latent distributions
//! and their fusion, the recurrent state-space world model and its
//! contrastive objective, the imagination actor-critic, toy multi-view
//! environments, and the byte-level replay and checkpoint codecs. File IO,
//! configuration and the CLI live in the `mvdream` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod replay;
pub mod scalar;
pub mod tensor;
pub mod worldmodel;

pub use autodiff::{GradientMap, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
