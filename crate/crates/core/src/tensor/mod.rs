//! Dense tensors, the autodiff tape and the layer primitives built on it.

pub mod adtn;
mod conv;
mod dense;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;

pub use dense::{Tensor, MAX_RANK};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheck};
pub use ops::{Activation, BatchStats, Normalization, Reduction};
pub use scalar::Scalar;
pub use tape::{BackwardCtx, BackwardFn, Tape, Var};
