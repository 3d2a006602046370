#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod catalog;
pub mod dcs;
pub mod discretize;
pub mod error;
pub mod expr;
pub mod model;
pub mod ocp;
pub mod parser;
pub mod reformulate;
pub mod simulate;
pub mod solve;
pub mod tableau;

pub use error::{Error, Result};
pub use expr::{Category, Expr, ResidualBundle};
