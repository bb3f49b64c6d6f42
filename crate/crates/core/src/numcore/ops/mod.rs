//! Differentiable operations, implemented as methods on [`Tape`](super::Tape).

mod basic;
mod conv;
mod linalg;
mod nn;
mod sample;

pub use conv::ConvGeom;
pub use nn::{BnBatchStats, BnMode, BnRunning, IGNORE_INDEX};

pub(crate) use sample::bilinear_taps;
