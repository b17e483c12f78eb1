//! Deep metric learning with an auxiliary encoder trained on mined,
//! class-independent structure.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over dense
//! `f64` matrices, an MLP model with a class head and an auxiliary head,
//! metric-learning losses and miners, surrogate-label clustering, evaluation
//! metrics, and the alternating training loop.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kmeans;
pub mod losses;
pub mod matrix;
pub mod miners;
pub mod model;
pub mod optim;
pub mod surrogate;
pub mod train;

pub use autodiff::{Gradients, NodeId, Tape};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{EmbedBatch, ModelDims, ModelParams};
