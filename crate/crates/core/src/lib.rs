//! Federated adaptive prompt tuning over a synthetic multi-domain world.
//!
//! A frozen image/text encoder pair classifies by cosine similarity between
//! an image feature and per-class text features. Clients tune a shared meta
//! prompt, each modulated by the frozen key of its domain, and a small
//! adaptive net that learns which domain a sample comes from. The server
//! averages both every round.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apt;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod gradcheck;
pub mod io;
pub mod numerics;
pub mod scenario;
pub mod training;
pub mod world;

pub use apt::{AdaptiveNet, KeyScheme, KeySet, Prompt, PromptMode};
pub use encoders::{EncoderConfig, EncoderPair, FixedHead};
pub use error::{Error, Result};
pub use evaluation::{EvalOptions, EvalReport, PrecomputedHead, QPolicy};
pub use federation::{Client, FedConfig, FedState, Method, RoundRecord, Sampling, Supervision, TrainingConfig};
pub use io::Checkpoint;
pub use numerics::{Rng, Stream, Tensor};
pub use training::{EncodedSample, LearnerConfig, LocalLearner, UnsupConfig};
pub use world::{Beta, PartitionConfig, Sample, World, WorldConfig};
