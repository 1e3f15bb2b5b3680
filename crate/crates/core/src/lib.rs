pub mod assemble;
pub mod assign;
pub mod balance;
pub mod data;
pub mod design;
pub mod error;
pub mod lp;
pub mod outcome;
pub mod pipeline;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
