#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod instance;
pub mod sta;
pub mod train;
pub mod verify;

pub use autodiff::{Matrix, NodeId, Tape};
pub use error::{Error, Result};
