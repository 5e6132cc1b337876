//! Self-supervised patch-wise transformer that splits every patch embedding
//! into an anatomy half and a characteristic half, recombines halves across
//! images through a parameter-free outer-product synthesizer, and uses the
//! resulting synthetic images for domain-generalizing augmentation.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mixing;
pub mod nn;
pub mod optim;
pub mod par;
pub mod patch;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
