use thiserror::Error;

pub type Result<T> = std::result::Result<T, NdError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NdError {
    #[error("{kernel}: shape mismatch ({detail})")]
    Shape { kernel: &'static str, detail: String },

    #[error("{kernel}: produced a non-finite value")]
    NonFinite { kernel: &'static str },

    #[error("{kernel}: index {index} out of range for size {size}")]
    Index {
        kernel: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("adam: parameter {id} has shape {param:?} but gradient has shape {grad:?}")]
    AdamShape {
        id: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

impl NdError {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        NdError::Shape {
            kernel,
            detail: detail.into(),
        }
    }
}
