pub mod attention;
pub mod checkpoint;
pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ranked;
pub mod records;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use vocab::Vocabulary;
