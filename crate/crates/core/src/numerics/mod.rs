//! Dense linear algebra, the seeded generator, and the finite-difference checker.

mod fdiff;
mod matrix;
mod parallel;
mod rng;

pub use fdiff::{finite_diff_grad, max_rel_err, DEFAULT_STEP};
pub use matrix::{dot, Matrix};
pub use parallel::{par_map, thread_count};
pub use rng::{bernoulli_vector, Rng};
