//! Multimodal federated learning with missing-modality reconstruction.
//!
//! Each client trains one VAE per modality, latent mapping models that carry
//! a source modality's posterior over to a target modality, and a task model
//! that fuses real and reconstructed modality features with attention. A
//! frozen copy of the round-start global generators runs alongside the local
//! ones. The server averages every parameter family after each round.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod fusion;
pub mod mapping;
pub mod mvae;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tensor.md")]
    mod tensor {}
    #[doc = include_str!("../../../book/src/generators.md")]
    mod generators {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
