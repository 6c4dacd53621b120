use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why an utterance could not be reduced to a (subject, relation, object) triple.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no supported relation phrase in \"{0}\"")]
    NoRelation(String),
    #[error("empty {0} noun phrase")]
    EmptyNounPhrase(&'static str),
    #[error("subject and object are both \"{0}\"")]
    SameSubjectObject(String),
    #[error("bad synonym table line {line}: {reason}")]
    SynonymTable { line: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("unknown object id {0}")]
    UnknownId(u32),
    #[error("subject and object refer to the same object ({0})")]
    SelfRelation(u32),
    #[error("no object is held")]
    NothingHeld,
    #[error("no object of category \"{0}\" in the scene")]
    UnknownCategory(String),
    #[error("invalid detection noise: {0}")]
    InvalidNoise(String),
    #[error("generation failed: {0}")]
    GenerationFailure(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no (positive, negative) pairs to compare")]
    EmptyPairSet,
    #[error("no parseable segments in the dataset")]
    NoParseableSegments,
    #[error("none of the {0} sampled placements is plausible")]
    NoPlausiblePlacement(usize),
    #[error("shaping requested without a goal")]
    NoGoal,
    #[error("reward source needs a detector checkpoint")]
    MissingDetector,
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
