//! M-Mixer: multi-modal sequence classification with recurrent
//! cross-modality fusion.
//!
//! The crate is self-contained. [`autodiff`] is a small reverse-mode engine
//! over dense [`Tensor`]s; the model pieces ([`mcu`], [`cfem`], [`bank`]) are
//! written against it, and [`network`] assembles them. [`synthdata`] builds
//! toy tasks whose labels need more than one modality, [`train`] and
//! [`experiment`] run the studies, and [`gradcheck`] verifies every gradient
//! against central differences.

// Comparisons like `!(x > 0.0)` are negated on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod autodiff;
pub mod bank;
pub mod cfem;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gradcheck;
pub mod mcu;
pub mod network;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use exec::Parallelism;
pub use network::{ContentMode, EpisodeBatch, FusionMode, Model, ModelConfig};
pub use params::{GradStore, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
