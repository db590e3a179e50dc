//! Differentiable tensor operations.
//!
//! [`Array`] is plain storage, [`Tensor`] is a graph-tracked value, and
//! [`Graph`] owns the tape for one forward/backward round. See
//! [`graph`] for the op set and autodiff rules.

mod array;
pub mod conv;
mod graph;

pub use array::Array;
pub use graph::{BnBatchStats, Graph, Tensor};

use crate::rng::Prng;

/// Draw an array of i.i.d. standard normal values from `rng`.
pub fn gaussian_sample(shape: &[usize], rng: &mut Prng) -> Array {
    rng.normal_array(shape)
}
