pub mod autograd;
pub mod error;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod nn;
pub mod gradcheck;
mod gradcheck_cases;
pub mod losses;
pub mod distill;
pub mod data;
pub mod scenario;
pub mod augment;
pub mod optim;
pub mod ewc;
pub mod train;
pub mod eval;
pub mod config;
pub mod run;
pub mod report;
