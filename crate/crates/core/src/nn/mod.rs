//! Small reverse-mode autodiff engine over dense `f64` tensors.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, grad_check, CoordSampling, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: operand shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{targets} targets for {rows} logit rows")]
    TargetCount { rows: usize, targets: usize },
    #[error("mask has {got} entries, expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("attention mask row allows no entries")]
    EmptyMaskRow,
    #[error("nothing to concatenate")]
    EmptyConcat,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value at parameter {param}, coordinate {coord}")]
    NonFinite { param: usize, coord: usize },
    #[error("finite-difference step {0} outside [1e-5, 1e-3]")]
    StepOutOfRange(f64),
    #[error("optimizer state expects {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("learning rate must be non-negative and finite, got {0}")]
    BadLearningRate(f64),
}
