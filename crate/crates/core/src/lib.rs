//! Character-CNN + BiLSTM sequence tagger with a linear-chain CRF head,
//! bidirectional language-model pretraining, and weight transfer.
//!
//! Every numeric component is generic over [`Scalar`]; `f32` is used for
//! training and `f64` for gradient checks. The aliases at the bottom of
//! this file name the two concrete instantiations.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bilm;
pub mod checkpoint;
pub mod corpus;
pub mod desk;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ner_head;
pub mod scalar;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamSet, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
