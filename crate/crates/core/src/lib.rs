//! Ranks candidate clarification questions for a forum post.
//!
//! Posts, questions and answers are embedded once by a frozen sentence
//! encoder and kept in an [`store::EmbeddingStore`]. A small feed-forward
//! classifier ([`nn::MlpModel`]) is trained on concatenated post/question
//! (optionally answer) embeddings to predict whether a question belongs to
//! the post. Each post's ten candidates are ranked by the predicted
//! probability of relevance and scored with Precision@k against the Best and
//! Valid annotations.

pub mod data;
pub mod digest;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ranker;
pub mod remote;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use data::{AnnotationSet, Candidate, CandidateSet, Regime, Split, SplitManifest, TripleRecord};
pub use error::{Error, ErrorKind, Result};
pub use eval::{BucketReport, EmptyGold, PrecisionReport};
pub use nn::{AdamState, Checkpoint, MlpModel};
pub use ranker::{Encoder, FeatureSpec, RankedList, Variant};
pub use store::{EmbeddingLookup, EmbeddingStore, EmbeddingVector, Role};
pub use trainer::{TrainConfig, TrainLog, TrainingExample};
