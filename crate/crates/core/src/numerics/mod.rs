//! Dense linear algebra, seeded randomness, reverse-mode differentiation and
//! the Adam optimizer.

mod adam;
mod matrix;
pub mod rng;
mod tape;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use matrix::Matrix;
pub use rng::{SeedStreams, StreamRng};
pub use tape::{Gradients, NodeId, Tape};
