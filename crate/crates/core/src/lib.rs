#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluate;
pub mod io;
pub mod linalg;
pub mod models;
pub mod par;
pub mod preprocess;
pub mod simulate;
pub mod solar;
pub mod spectral;

pub use error::{Error, Result};
