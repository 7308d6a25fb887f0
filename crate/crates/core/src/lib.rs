pub mod datasets;
pub mod debugger;
pub mod error;
pub mod explainer;
pub mod kv;
pub mod numerics;
pub mod protomodel;
pub mod trainer;

pub use error::{Error, Result};
