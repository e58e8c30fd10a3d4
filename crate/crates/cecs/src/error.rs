//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Tensor and graph
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: String, detail: String },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value in output of node {node} ({op})")]
    NonFiniteValue { node: usize, op: String },
    #[error("non-finite gradient for node {node} ({op})")]
    NonFiniteGradient { node: usize, op: String },
    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("gradient check at a kink: node {node} ({op}), {detail}")]
    DegeneratePoint { node: usize, op: String, detail: String },
    #[error("no input named {0:?} in graph")]
    UnknownInput(String),
    #[error("duplicate input name {0:?}")]
    DuplicateInput(String),
    #[error("invalid step {0} for gradient check (must be > 0)")]
    InvalidStep(f64),
    #[error("gradient check failed for {op}: max rel err {max_rel_err}")]
    GradCheckFailed { op: String, max_rel_err: f64 },

    // Augmentation
    #[error("invalid region side q={q} for grid n={n} (need 1 <= q <= n)")]
    InvalidQ { q: usize, n: usize },
    #[error("image {height}x{width} not divisible into {n}x{n} grid cells")]
    GridMismatch { height: usize, width: usize, n: usize },
    #[error("region ({row},{col}) size {q} exceeds grid n={n}")]
    RegionOutOfGrid { row: usize, col: usize, q: usize, n: usize },
    #[error("image shape mismatch: expected {expected:?}, got {got:?}")]
    ImageShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("no donor available: dataset has no category other than {label}")]
    NoDonorAvailable { label: usize },
    #[error("channel {channel} has zero standard deviation; cannot normalize")]
    ZeroStd { channel: usize },

    // Losses and model
    #[error("label {label} out of range for {k} categories")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("class {class} out of range for {k} categories")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("invalid category count {0} (need k >= 2)")]
    InvalidCategoryCount(usize),
    #[error("model expects {expected} input channels, image has {got}")]
    ChannelMismatch { expected: usize, got: usize },

    // Data
    #[error("invalid dataset spec: {0}")]
    InvalidSynthSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("empty category directory {0}")]
    EmptyCategory(String),
    #[error("cannot decode {path}: {reason}")]
    Undecodable { path: String, reason: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: header declares {declared} bytes, found {found}")]
    TruncatedPayload { declared: usize, found: usize },
    #[error("tensor dimensions overflow codec limits: {0}")]
    DimensionOverflow(String),
    #[error("category {category:?} has {count} samples; 1:1 split needs an even count >= 2")]
    OddCategoryCount { category: String, count: usize },
    #[error("empty dataset")]
    EmptyDataset,

    // Trainer
    #[error("train and test sets disagree on categories: {train} vs {test}")]
    CategoryMismatch { train: usize, test: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    // Config
    #[error("{path}:{line}: unknown config key {key:?}")]
    ConfigUnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: cannot parse {key} value {value:?}: {reason}")]
    ConfigUnparsable { path: String, line: usize, key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    ConfigSyntax { path: String, line: usize, text: String },
    #[error("config invariant violated: {0}")]
    ConfigInvariant(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
