//! Human-in-the-loop correction of sampled chain-of-thought rationales.
//!
//! Rationales are sampled per question, ranked by the entropy of their
//! answers, and the most uncertain fraction is routed to a human who edits
//! individual sentences before the model answers again. A Cobb-Douglas model
//! prices the human and model labor involved.

pub mod aggregation;
pub mod camlop;
pub mod correction;
pub mod domain;
pub mod filtering;
pub mod sampling;
pub mod store;

pub use domain::{
    AnswerDistribution, AnswerFormat, AnswerKind, AnswerValue, DiversityScore, Rationale, Sample, Strategy, Vote,
};
