//! Joint mention detection and entity disambiguation over a frozen text encoder.
//!
//! The pipeline runs word-level IOB documents through a WordPiece tokenizer,
//! a frozen (pluggable) context encoder, and two trainable feed-forward heads:
//! a softmax tagger over `{I, O, B}` and a `tanh` projection into the entity
//! embedding space. Projections are linked by cosine similarity against the
//! whole entity universe or against a per-surface candidate set, and results
//! are scored with strong-matching span-level InKB micro/macro F1.
//!
//! Module map:
//!
//! - [`corpus`]: documents, entity tables, candidate tables and their file formats
//! - [`tokenizer`]: WordPiece vocabulary, greedy longest-match, head-piece alignment
//! - [`encoder`]: the frozen context encoder interface, hashed encoder, precomputed matrices
//! - [`model`]: prediction heads, multi-task loss, analytic gradients, Adam
//! - [`entity_index`]: sharded cosine nearest-neighbour search
//! - [`decoder`]: IOB repair and span-level linking
//! - [`evaluator`]: strong-matching F1 and ED accuracy
//! - [`trainer`]: run configuration, training loop, checkpoints, evaluation
//! - [`cli`]: command-line dispatch

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod entity_index;
pub mod error;
pub mod evaluator;
pub mod matrix;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

mod io_util;

pub use error::{Error, Result};
