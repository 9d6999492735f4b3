//! A small reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records every operation applied to its [`Tensor`] handles.
//! Calling [`Graph::backward`] on a scalar walks the recorded nodes in reverse
//! creation order (which is a valid reverse topological order, since a node can
//! only reference nodes created before it) and accumulates gradients into every
//! leaf created with [`Graph::variable`].
//!
//! ```
//! use pournet::tensor::Graph;
//!
//! let g = Graph::<f64>::new();
//! let w = g.variable(vec![1], vec![3.0]).unwrap();
//! let x = g.constant(vec![1], vec![2.0]).unwrap();
//! let y = g.constant(vec![1], vec![1.0]).unwrap();
//! let loss = w.mul(x).unwrap().mse(y).unwrap();
//! g.backward(loss).unwrap();
//! // d/dw (w·x − y)² = 2·x·(w·x − y)
//! assert_eq!(w.grad().unwrap(), vec![2.0 * 2.0 * (6.0 - 1.0)]);
//! ```
//!
//! Feature maps use the `(batch, channels, z, y, x)` layout with x fastest.
//! There is no broadcasting: every binary op requires identical shapes, and
//! the per-channel scaling needed by squeeze-and-excitation is its own op.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod resample;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{concat_channels, conv3d, dense, Graph, Tensor};
pub use params::{Bound, Param, ParamStore};
pub use resample::Resample;

/// Floating point scalar the engine computes in (`f32` for training,
/// `f64` for gradient checks).
pub trait Real:
    Float + Send + Sync + Debug + Default + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
