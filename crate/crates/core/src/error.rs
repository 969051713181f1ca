use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical substrate, the models and the corpus tools.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorData { shape: Vec<usize>, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("trainable parameter `{0}` has no gradient buffer")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("attention mask length {got} does not match sequence length {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("every key of an attention row is masked")]
    FullyMasked,

    #[error("empty sentence")]
    EmptySentence,
    #[error("target position {position} out of range for sentence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("character '{0}' is missing from the pronunciation dictionary")]
    MissingFromDictionary(char),
    #[error("label `{label}` is not a candidate pronunciation of '{ch}'")]
    LabelNotCandidate { ch: char, label: String },
    #[error("invalid dictionary entry for '{ch}': {reason}")]
    InvalidDictionaryEntry { ch: char, reason: String },
    #[error("unknown character '{ch}' at position {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("predictor returned `{label}` for '{ch}', outside its candidate set")]
    PredictorOutOfCandidates { ch: char, label: String },
    #[error("character '{0}' is not in the polyphone inventory")]
    NotInInventory(char),
    #[error("fold count must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("fold assignment covers {folds} samples but the corpus has {samples}")]
    FoldMismatch { folds: usize, samples: usize },
    #[error("invalid generator config: {0}")]
    InvalidSynthConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sentence has no maskable positions")]
    NothingToMask,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("encoder must be frozen before head training")]
    EncoderNotFrozen,

    #[error("character '{0}' has no registered output layer")]
    Unregistered(char),
    #[error("character '{0}' is already registered")]
    DuplicateRegistration(char),
    #[error("character '{ch}' needs at least 2 candidates, got {count}")]
    TooFewCandidates { ch: char, count: usize },
    #[error("operation requires a transformer head")]
    NotTransformerHead,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;
