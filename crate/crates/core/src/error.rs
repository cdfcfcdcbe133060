use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("pooling window {kernel} larger than axis length {len}")]
    Window { kernel: usize, len: usize },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("every row is ignored; the loss is undefined")]
    AllIgnored,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape is closed: backward already ran on this trace")]
    TapeClosed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown LoRA target `{0}`")]
    UnknownTarget(String),
    #[error("LoRA rank {rank} must be smaller than {min_dim}")]
    RankTooLarge { rank: usize, min_dim: usize },
    #[error("model has no adapters to merge")]
    NoAdapters,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid 4-bit code {0}")]
    InvalidCode(u8),
    #[error("empty reference set")]
    EmptyReferences,
    #[error("empty candidate")]
    EmptyCandidate,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need {needed} exemplars, pool has {available}")]
    InsufficientExemplars { needed: usize, available: usize },
    #[error("record `{0}`: gold label is not one of the options")]
    GoldNotInOptions(String),
    #[error("record `{0}`: no options")]
    NoOptions(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(usize),
    #[error("class-set mismatch: label `{label}` (record `{record}`) is not a known class")]
    ClassMismatch { record: String, label: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reports disagree on columns: `{0}` vs `{1}`")]
    ConflictingColumns(String, String),
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
