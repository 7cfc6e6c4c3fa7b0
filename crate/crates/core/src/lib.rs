//! Multi-view multi-graph embedding.
//!
//! Collections of symmetric weighted graphs observed under several views are
//! stacked into partially-symmetric tensors and jointly factorized into a
//! shared low-dimensional subject embedding, which is then clustered and
//! scored against known labels.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clustering;
pub mod cp_als;
pub mod datagen;
pub mod error;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod runner;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use solver::{m2e_ds_fit, m2e_fit, m2e_ts_fit, M2eConfig, M2eSolution, Method, MuPolicy};
pub use tensor::{CpFactors, GraphViewTensor, Tensor3};
