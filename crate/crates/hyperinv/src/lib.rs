//! Amortized invariance learning at desk scale.
//!
//! A small hypernetwork maps a low-dimensional *invariance descriptor*
//! to the weights of a convolutional feature encoder. Pre-training bakes
//! a manifold of invariances into the hypernetwork; a downstream task
//! then recovers its preferred invariance by gradient descent on the
//! descriptor plus a linear head. A closed-form generalization bound
//! grounds the discretized-descriptor protocol.
//!
//! The guide under `book/` walks through each piece; its code snippets
//! are compiled and run as doctests by the `book-tests` crate.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod glyphs;
pub mod hypernet;
pub mod gradcheck;
pub mod idx;
pub mod optim;
pub mod report;
pub mod rng;
pub mod transforms;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{cosine_similarity, Tensor};
