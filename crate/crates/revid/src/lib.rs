//! Sequence-based vehicle re-identification, end to end and from first
//! principles: a reverse-mode autodiff tape, dense and LSTM layers, a
//! variational feature head, classification and divergence losses, Adam with
//! step decay, synthetic data with query-time augmentation, staged training
//! with component freezing, and CMC / mAP retrieval evaluation. The `revid`
//! binary exposes the whole pipeline on the command line.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — float64 tensors and the autodiff [`tensor::Tape`].
//! * [`layers`] — dense layers, the LSTM, and the variational feature head.
//! * [`losses`] — softmax cross-entropy, KL-to-standard-normal, combined loss.
//! * [`optim`] — Adam and the step-decay learning-rate schedule.
//! * [`data`] — images, feature records, augmentation, sequences, synthesis.
//! * [`pipeline`] — the three-component model, staged training, inference.
//! * [`eval`] — retrieval protocol: ranking, CMC top-k, mean average precision.
//! * [`gradcheck`] — finite-difference verification of every layer and loss.
//! * [`config`] / [`checkpoint`] — run configuration and weight persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub mod commands;

// Compile and run the guide's code blocks as doctests so the book cannot
// drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/layers.md")]
    pub struct Layers;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/optimization.md")]
    pub struct Optimization;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
}
