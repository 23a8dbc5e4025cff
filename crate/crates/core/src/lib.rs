#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod asymptotics;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod linalg;
pub mod lqr;
pub mod stats;

pub use error::{LqacError, Result};
