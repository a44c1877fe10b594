//! Wavelet-packet guided, graph-enhanced sequential recommendation.
//!
//! The crate is layered bottom-up:
//!
//! * numeric substrate: [`tensor`], [`sparse`], [`tape`], [`nn`], [`optim`],
//!   [`spectrum`], [`checkpoint`]
//! * [`wavelet`]: undecimated packet transform and subband descriptors
//! * [`graph`]: bipartite interaction graph, scaled Laplacian, Chebyshev
//!   propagation
//! * [`model`]: the forward pass and training objective
//! * [`data`], [`eval`], [`train`]: preprocessing, full-ranking metrics and
//!   the training loop

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod layout;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sparse;
pub mod spectrum;
pub mod sweep;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
