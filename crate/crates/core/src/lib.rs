pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradsuite;
pub mod inference;
pub mod io;
pub mod knowledge;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
