// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod indicators;
pub mod model;
pub mod record;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod text;

pub use error::{Error, ErrorKind, Result, TensorError};
pub use record::{DayRecord, PriceBar};
pub use tensor::{Graph, Tensor, Var};
