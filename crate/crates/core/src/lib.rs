//! Knowledge distillation through smoothed input texts.
//!
//! A teacher masked language model turns every training text into a
//! sequence of word distributions: each position keeps weight `λ` on the
//! observed token and spreads `1 − λ` over the teacher's prediction for that
//! position. A smaller student is then trained on those soft inputs and
//! evaluated on plain token ids.
//!
//! The crate is self-contained: [`tensor`] and [`autodiff`] provide the
//! numerics, [`transformer`] the encoder used for both teacher and student,
//! [`smoothing`] the soft-input construction, [`distill`] the training
//! procedures and baselines, and [`sampler`] draws sentences back out of a
//! smoothed input.

pub mod autodiff;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod optim;
pub mod sampler;
mod persist;
pub mod smoothing;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamConfig, AdamState};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/experiment.md")]
    mod experiment {}
}
