//! Retrieval-pretrained transformer: a chunk-wise retrieval-augmented decoder
//! whose retriever is trained jointly with the language model.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lexical;
pub mod model;
pub mod params;
pub mod supervision;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Result, RptError};
