use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs} vs rhs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("tensor dimensions must be >= 1, got {0:?}")]
    ZeroDim([usize; 4]),
    #[error("{op}: {channels} channels not divisible by {groups}")]
    Divisibility {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("imaginary residue {max_imag:e} exceeds tolerance {tol:e}")]
    ImaginaryResidue { max_imag: f64, tol: f64 },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("degenerate box (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },
    #[error("training diverged at step {step}; last finite loss: {last}")]
    Diverged { step: usize, last: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
