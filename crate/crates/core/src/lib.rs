pub mod cli;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod gmrf;
pub mod inference;
pub mod io;
pub mod neighborhood;
pub mod simulation;

pub use error::{Error, Result};
