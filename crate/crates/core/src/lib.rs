pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod replay;
pub mod tape;

pub use error::{Result, UrclError};
