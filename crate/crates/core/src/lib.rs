//! Multi-modal bird's-eye-view segmentation with cross-modal feature fusion,
//! feature alignment and cross-view segmentation alignment.

pub mod align;
pub mod error;
pub mod geometry;
pub mod io;
pub mod harness;
pub mod kv;
pub mod model;
pub mod numcore;
pub mod synthdata;
pub mod xff;

pub use error::{Error, Result};
