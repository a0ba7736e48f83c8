//! Contextual emotion detection for three-turn conversations.
//!
//! The crate classifies the emotion (others / happy / angry / sad) of the last
//! turn of a conversation. It contains everything from text normalization to
//! k-fold ensembling:
//!
//! - [`corpus`]: conversation files, synthetic corpora, fold plans.
//! - [`textprep`]: emoji aliasing and tweet-style token normalization.
//! - [`embed`]: word-vector tables and the contextual / sentence-affect encoders.
//! - [`neural`]: tensors, affine layers, BiLSTM, self-attention, loss, Adam.
//! - [`models`]: the flat (SL, SLD) and hierarchical (HRLCE) classifiers.
//! - [`train`]: importance-weighted training and cross-validation.
//! - [`inference`]: prediction files and majority voting.
//! - [`metrics`]: confusion matrices, F1 and the harmonic-mean score.
//! - [`cli`]: the `emoctx` command line.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod textprep;
pub mod train;

pub use corpus::{Conversation, EmotionLabel, FoldPlan, LabelDist};
pub use error::{Error, Result};
