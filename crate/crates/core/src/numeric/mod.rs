//! Differentiable numeric substrate: tensors, a reverse-mode tape, a real
//! FFT, finite-difference gradient checking and FLOP accounting.

pub mod fft;
pub mod flops;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use fft::{rfft, Spectrum};
pub use flops::{count_flops, FlopClass, FlopReport, FlopShape};
pub use gradcheck::{grad_check, GradCheckReport, ParamMap};
pub use tape::{softmax_attention, Gradients, Grouping, Tape, Var};
pub use tensor::{matmul, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape was built in inference mode and cannot run backward")]
    NotRecorded,
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
