//! Dense tensors, a reverse-mode tape with hand-derived gradients, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use ops::{BnBatchStats, BnMode, BnRunning, IGNORE_INDEX};
pub use params::{init_conv_bn, ParamStore, Session};
pub use tape::{BackwardArgs, BackwardFn, Gradients, Tape, Var};
pub use tensor::{DiffTensor, Real};

pub(crate) use tensor::{like_nchw, nchw};
