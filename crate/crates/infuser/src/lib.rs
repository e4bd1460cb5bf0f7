//! Knowledge integration for a small decoder-only language model.
//!
//! The pipeline turns knowledge-graph triplets into multiple-choice questions
//! and declarative statements, detects which facts a frozen base model already
//! answers correctly, then trains bottleneck adapters (parallel to the FFN
//! sublayers) plus a per-layer gating head — the infuser — so that new facts
//! are stored in the adapters while the gate suppresses their contribution on
//! inputs the base model already handles. Evaluation reports newly-learned
//! rate, remembering rate, per-template F1 and gate-score statistics.

pub mod detect;
pub mod error;
pub mod eval;
pub mod exp;
pub mod kg;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tok;
pub mod train;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
