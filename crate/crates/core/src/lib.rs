//! Image captioning decoders with part-of-speech guidance.
//!
//! The pipeline: tagged captions are quantized into a small set of medoid
//! tag sequences, a classifier predicts medoids from image features, and a
//! caption model is decoded either by (diverse) beam search or greedily
//! under each predicted medoid. Metrics and re-ranking score the output.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod posclassify;
pub mod posquant;
pub mod rerank;
pub mod seqmodel;
pub mod synth;

pub use corpus::{Dataset, Features, Split, Tag, TaggedCaption, Vocabulary};
pub use decode::{DecodeConfig, DecodeStats, Hypothesis, Strategy};
pub use error::{Error, Result};
pub use posclassify::PosClassifier;
pub use posquant::{MedoidSet, TagSequence};
pub use seqmodel::{ConditionalModel, ContextRoot, ModelContext, TabularCaptionModel};
