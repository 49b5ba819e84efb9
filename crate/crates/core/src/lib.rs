//! Answer grounding with sentence attention blocks.
//!
//! A small CNN backbone produces a feature pyramid. At each active level a
//! sentence attention block ([`nn::attention::sab_forward`]) turns the
//! question/answer embedding into a per-channel gate. The gated levels are
//! fused top-down into a two-class mask. Training uses cross entropy mixed
//! with region mutual information ([`loss::combined_loss`]) and AdamW with
//! polynomial decay.
//!
//! Everything runs on the taped f64 [`Tensor`] in [`tensor`], and
//! [`verify`] checks its gradients against central differences.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
