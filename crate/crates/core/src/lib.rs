#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discretize;
pub mod eval;
pub mod error;
pub mod filters;
pub mod io;
pub mod models;
pub mod numkit;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
