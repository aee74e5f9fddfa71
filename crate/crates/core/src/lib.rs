//! Semantic generation pyramid.
//!
//! A frozen image classifier supplies a pyramid of features (one tap per conv
//! stage plus the two last fully-connected layers). A mirrored generator
//! consumes any mask-gated subset of that pyramid together with noise and a
//! class label, and is trained adversarially with a feature-reconstruction
//! term and a mode-seeking diversity term. On top of the trained model sit
//! four pipelines: level inversion, re-painting, composition and re-labeling.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and the HTTP
//! service live in the `pyragen` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod apps;
pub mod backbone;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod image;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
