//! Two-stage identity-aware matching of textual descriptions and images.
//!
//! Stage 1 trains a pair of encoders with a cross-modal cross-entropy loss
//! against per-identity feature buffers and screens candidates by cosine
//! affinity. Stage 2 re-scores the top candidates with a co-attention pair
//! verifier.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod checkpoint;
pub mod cmce;
pub mod coattention;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod numcore;
pub mod pipeline;
pub mod run;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array32 = numcore::DenseArray<f32>;
pub type Array64 = numcore::DenseArray<f64>;
pub type Tape32 = numcore::Tape<f32>;
pub type Tape64 = numcore::Tape<f64>;
pub type EncoderParams32 = encoders::EncoderParams<f32>;
pub type EncoderParams64 = encoders::EncoderParams<f64>;
pub type FeatureBuffer32 = cmce::FeatureBuffer<f32>;
pub type FeatureBuffer64 = cmce::FeatureBuffer<f64>;
pub type MatchingNetwork32 = coattention::MatchingNetwork<f32>;
pub type MatchingNetwork64 = coattention::MatchingNetwork<f64>;
