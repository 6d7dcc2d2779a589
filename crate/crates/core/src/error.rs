use thiserror::Error;

use crate::schedule::ScheduleViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{what} must be at least 1")]
    ZeroDimension { what: &'static str },

    #[error("indivisible grid on axis {axis}: grid extent {grid} is not a multiple of tile extent {tile}")]
    IndivisibleGrid { axis: char, grid: usize, tile: usize },

    #[error("token index {index} out of range for {len} tokens")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("tile ({t},{h},{w}) out of range for tile grid {dims:?}")]
    TileOutOfRange {
        t: usize,
        h: usize,
        w: usize,
        dims: [usize; 3],
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value {value} in {context}")]
    NonFinite { value: f32, context: &'static str },

    #[error("NaN cannot be encoded as FP8")]
    NanInput,

    #[error("code {code:#04x} is a NaN pattern in {format}")]
    NanCode { code: u8, format: &'static str },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { value: f32 },

    #[error("{0} is only defined for E4M3")]
    UnsupportedFormat(&'static str),

    #[error("group size {group} does not divide {cols} columns")]
    IndivisibleGroup { group: usize, cols: usize },

    #[error("granularity {0} is not supported here")]
    UnsupportedGranularity(&'static str),

    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f32),

    #[error("density {0} outside (0, 1]")]
    InvalidDensity(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("reference signal is all zero")]
    ZeroReference,

    #[error("softmax scale must be positive and finite, got {0}")]
    InvalidSoftmaxScale(f32),

    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid schedule: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSchedule(Vec<ScheduleViolation>),

    #[error("mask and tile map disagree: mask tile grid {mask:?}, map tile grid {map:?}")]
    MaskMismatch { mask: [usize; 3], map: [usize; 3] },

    #[error("query row {0} has no admissible keys")]
    EmptyRow(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config: {0}")]
    Config(String),
}
