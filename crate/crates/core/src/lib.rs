// `!(x <= limit)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembler;
pub mod cli;
pub mod error;
pub mod exec;
pub mod generator;
pub mod mc;
pub mod model;
pub mod pde;
pub mod premium;
pub mod scenario;

pub use error::{Error, Result};
pub use exec::Execution;
