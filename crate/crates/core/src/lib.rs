pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
