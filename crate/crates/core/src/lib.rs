#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod affine;
pub mod ambient;
pub mod bonnet;
pub mod error;
pub mod fixtures;
pub mod gcr;
pub mod grid;
pub mod hessian;
pub mod lauritzen;
pub mod linalg;
pub mod report;
pub mod structures;

pub use error::{GeometryError, Result};
