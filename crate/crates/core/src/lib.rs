#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coupling;
pub mod enkbf;
pub mod error;
pub mod fpf1d;
pub mod linear_gauss;
pub mod noise;
pub mod observation;
pub mod runner;
pub mod signal;
pub mod spectral;
pub mod table;

pub use error::{Error, Result};
