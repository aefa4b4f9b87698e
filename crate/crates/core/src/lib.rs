//! Sigmoid self-attention laboratory.
//!
//! * [`matrix`], [`ops`], [`rng`]: dense `f64` linear algebra, activations and
//!   seeded sampling.
//! * [`attn`]: reference softmax/sigmoid attention with analytic backward and
//!   every bias, normalization and positional knob.
//! * [`flash`]: tiled, recomputation-based sigmoid attention kernels with
//!   auxiliary-memory accounting.
//! * [`theory`]: bias solver, Lipschitz bound and Jacobian estimator, Hoyer
//!   sparsity, FLOP accounting and the contextual-mapping construction.
//! * [`gradcheck`]: central-difference checks of every backward pass.
//! * [`nn`]: a small pre-LN transformer with hand-written backward, the
//!   k-summation and pair-repeat tasks, Adam and the training loop.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attn;
pub mod error;
pub mod flash;
pub mod gradcheck;
pub mod matrix;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::{matmul, Matrix};
pub use ops::{frobenius_norm, row_softmax, sigmoid_via_tanh, spectral_norm};
pub use parallel::Schedule;
pub use rng::{rng_normal, Rng};
