//! Deterministic simulator of federated momentum-contrast (MoCo) training.
//!
//! `K` data nodes train a small encoder on private unlabeled images and
//! exchange only model parameters and Box-Cox-space feature statistics with a
//! parameter server. Two optional modules sit on top of a FedAvg baseline:
//!
//! * metadata transfer ([`metadata`]): nodes draw synthetic negatives from the
//!   Gaussian feature models of the other nodes;
//! * self-adaptive aggregation ([`rsa`]): node models are weighted by how much
//!   their representation geometry moved during the round.
//!
//! The [`federation`] module runs the round protocol over an auditable
//! message log, [`datagen`] produces the non-IID toy image shards, and
//! [`eval`] scores encoders with a linear probe and small-label fine-tuning.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod contrastive;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod metadata;
pub mod nn;
pub mod rng;
pub mod rsa;

pub use config::{AggregationMode, Arm, ExperimentConfig};
pub use error::{Error, Result};
pub use nn::{EncoderParams, FeatureVector, ImageSample, LayerShape};
