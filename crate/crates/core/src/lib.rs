//! Treatment-effect estimation that borrows external controls through a
//! penalized sieve model of the outcome and of the external-control bias.

pub mod basis;
pub mod cli;
pub mod data;
pub mod estimators;
pub mod error;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod penalty;
pub mod report;
pub mod sim;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
