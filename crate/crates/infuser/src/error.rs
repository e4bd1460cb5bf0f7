use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("template set for relation `{expected}` does not match triplet relation `{got}`")]
    RelationMismatch { expected: String, got: String },

    #[error("no template set found for relation `{0}`")]
    MissingRelation(String),

    #[error("template {template_id} for relation `{relation}`: {msg}")]
    BadTemplate {
        relation: String,
        template_id: usize,
        msg: String,
    },

    #[error("entity `{entity}` is not a contiguous token span of `{text}`")]
    SpanNotFound { entity: String, text: String },

    #[error("candidate pool too small: need {need} usable entities, have {have}")]
    PoolTooSmall { need: usize, have: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("all positions are padding; infusing score undefined")]
    AllPadding,

    #[error("layer index {layer} out of range for {depth} layers")]
    InvalidLayer { layer: usize, depth: usize },

    #[error("relation id `{0}` not in the relation set")]
    UnknownRelation(String),

    #[error("{0} is empty")]
    EmptySet(String),

    #[error("item sets differ: {0}")]
    ItemSetMismatch(String),

    #[error("non-finite loss at phase {phase}, step {step}: {value}")]
    NonFiniteLoss {
        phase: String,
        step: usize,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gate scores require infuser mode, got {0}")]
    NoGates(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(stage: &str, err: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(err),
        }
    }
}
