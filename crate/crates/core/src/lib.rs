pub mod checkpoint;
pub mod corpus;
pub mod dtm;
pub mod tam;
pub mod trainer;
pub mod error;
pub mod forecast;
pub mod metrics;
pub mod model;
pub mod synthgen;

pub use error::{DtamError, Result};
