pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rescoring;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
