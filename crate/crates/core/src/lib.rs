pub mod autograd;
pub mod bbox;
pub mod dataset;
pub mod degrade;
pub mod distill;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tracker;

pub use bbox::BoundingBox;
pub use error::{Error, Result};
