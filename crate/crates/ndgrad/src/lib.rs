//! A small dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything runs on the CPU with a fixed reduction order, so two runs with
//! the same inputs produce bit-identical results whether or not the `parallel`
//! feature is enabled. Kernels are generic over [`Real`] so the same graph can
//! be evaluated in `f32` for training and in `f64` for gradient checks.

mod adam;
mod error;
mod graph;
mod kernels;
pub mod par;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use error::{NdError, Result};
pub use graph::{Gradients, Graph, Op, ParamId, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
