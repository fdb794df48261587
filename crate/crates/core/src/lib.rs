pub mod anomaly_map;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod image;
pub mod memory;
pub mod nn;
pub mod pretext;
pub mod training;

pub use error::{Error, Result};
