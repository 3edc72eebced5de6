//! Dense linear algebra, stable nonlinearities and seeded random streams.

mod linalg;
mod matrix;
pub mod rng;
mod special;

pub use linalg::{cholesky_psd, spd_inverse, Cholesky, JitterPolicy};
pub use matrix::{axpy, dot, norm2, Matrix};
pub use rng::{derive_stream, RngStream};
pub use special::{argmax, logsumexp, sigmoid, softmax, softmax_in_place};
