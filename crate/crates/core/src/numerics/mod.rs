//! Dense linear algebra, seeded sampling, AdamW and summary statistics.
//!
//! All training math is carried out in `f64`. Reductions accumulate in a
//! fixed order so results are bit-reproducible for any rayon pool size.

mod adamw;
mod matrix;
mod rng;
mod stats;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use matrix::{axpy, dot, matmul, matmul_nt, Matrix};
pub(crate) use matrix::ROW_CHUNK;
pub use rng::{sample_gaussian, streams, RngStream};
pub use stats::{mean, pearson};
