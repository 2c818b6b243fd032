//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by tensor, loss, model, data, and federation operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Reduction or gather axis is out of range for the tensor rank.
    InvalidAxis { axis: usize, rank: usize },
    /// Division with a denominator below the hard floor and no epsilon applied.
    DivByTiny { min_abs: f64 },
    /// backward() called on a tensor that is not a single-element scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// backward() called on a tensor that was not produced on a live tape.
    NoTape,
    /// A tape can only be consumed by one backward() call.
    TapeConsumed,
    /// Two operands were recorded on different tapes.
    MixedTapes,
    /// The expression fed to grad_check did not reduce to a scalar.
    GradCheckNonScalar { shape: Vec<usize> },
    /// Finite-difference step outside the supported range.
    BadStep { h: f64 },
    /// Class topology violates one of its structural invariants.
    BadTopology(String),
    /// A label tensor expected to be one-hot has a voxel whose channel sum is not 1.
    LabelNotOneHot { voxel: usize, sum: f64 },
    /// Scheduler index out of range.
    StepOutOfRange { index: usize, total: usize },
    /// Convolution output extent would be non-positive.
    BadConvGeometry(String),
    /// Malformed checkpoint bytes.
    BadCheckpoint(String),
    /// Malformed dataset bytes.
    BadDataset(String),
    /// Checkpoint entries do not match the model parameters.
    ParamMismatch(String),
    /// Synthetic sample placement failed after bounded retries.
    PlacementFailed { seed: u64 },
    /// Invalid configuration value.
    InvalidConfig(String),
    /// A training loss became non-finite.
    NonFiniteLoss {
        client: String,
        step: usize,
        term: &'static str,
    },
    /// Aggregation received updates with mismatched parameters.
    AggregationMismatch(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::DivByTiny { min_abs } => write!(
                f,
                "division by near-zero value (min |denominator| = {min_abs:e}); apply an epsilon"
            ),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward() requires a scalar loss, got shape {shape:?}")
            }
            Error::NoTape => write!(f, "tensor was not produced on a live tape"),
            Error::TapeConsumed => write!(f, "tape already consumed by a previous backward()"),
            Error::MixedTapes => write!(f, "operands belong to different tapes"),
            Error::GradCheckNonScalar { shape } => {
                write!(f, "grad_check function must be scalar-valued, got {shape:?}")
            }
            Error::BadStep { h } => {
                write!(f, "finite-difference step {h:e} outside [1e-5, 1e-2]")
            }
            Error::BadTopology(msg) => write!(f, "invalid class topology: {msg}"),
            Error::LabelNotOneHot { voxel, sum } => {
                write!(f, "label is not one-hot at voxel {voxel} (channel sum {sum})")
            }
            Error::StepOutOfRange { index, total } => {
                write!(f, "schedule index {index} out of range for total {total}")
            }
            Error::BadConvGeometry(msg) => write!(f, "invalid convolution geometry: {msg}"),
            Error::BadCheckpoint(msg) => write!(f, "malformed checkpoint: {msg}"),
            Error::BadDataset(msg) => write!(f, "malformed dataset: {msg}"),
            Error::ParamMismatch(msg) => write!(f, "parameter mismatch: {msg}"),
            Error::PlacementFailed { seed } => {
                write!(f, "organ placement failed after bounded retries (seed {seed})")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFiniteLoss { client, step, term } => {
                write!(f, "non-finite {term} loss on client {client} at local step {step}")
            }
            Error::AggregationMismatch(msg) => write!(f, "aggregation mismatch: {msg}"),
        }
    }
}
