//! Latent language-image pretraining at desk scale.
//!
//! A vision transformer emits `K` mixture tokens per image; a multi-head
//! cross-attention head mixes them with weights conditioned on the caption
//! feature, and the pair is scored with a sigmoid pairwise contrastive loss.
//! The crate also carries the pooling baselines that interpolate between a
//! single-token sigmoid model and the full text-conditioned mixer, the
//! synthetic multi-caption dataset used to train them, and the evaluation
//! protocols (zero-shot classification, retrieval, spectrum, FLOP counts).

pub mod checks;
pub mod contextualization;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{LlipError, Result};
