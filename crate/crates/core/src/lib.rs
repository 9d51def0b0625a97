//! A desk-scale laboratory for adversarial anti-customization of diffusion
//! models.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), a toy
//! pixel-space DDPM with decoder feature taps ([`diffusion`]), the protection
//! engine that perturbs images against subject fine-tuning ([`attack`]),
//! diagnostics ([`analysis`]) and a customization harness that measures how
//! well protected images resist fine-tuning ([`eval`]).

pub mod analysis;
pub mod attack;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod kv;
pub mod lab;
pub mod manifest;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/protection.md")]
    mod protection {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
