// `!(x > 0.0)` is how NaN is rejected; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod altc;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fbwt;
pub mod files;
pub mod image;
pub mod nn;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod tone;
pub mod training;

pub use error::{Error, Result};
