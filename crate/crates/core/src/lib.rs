pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
