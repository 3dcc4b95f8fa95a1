//! Finite-depth machinery for bi-parameter Haar multipliers.
//!
//! Intervals are `(level, index)` pairs, functions live on explicit dyadic
//! grids, and every guarantee produced by the stabilizer is checked directly
//! before it is returned.

pub mod dyadic;
pub mod error;
pub mod faithful;
pub mod hash;
pub mod multiplier;
pub mod probe;
pub mod spaces;
pub mod stabilizer;

mod expectation;

pub use dyadic::{distribution, haar_step, DyadicInterval, StepFunction1D, StepFunction2D};
pub use error::{Error, Result};
pub use faithful::FaithfulSystem;
pub use multiplier::{Multiplier1D, Multiplier2D};
pub use spaces::{Coeffs2D, NormEstimate, NormOptions, SignRegime, SpaceKind, ZSpec};
