pub mod bridge;
pub mod coupling;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod gmm;
pub mod json;
pub mod linalg;
pub mod mitigation;
pub mod model;
pub mod pipeline;
pub mod probes;
pub mod project;
pub mod rng;
pub mod store;

pub use error::{Result, ScalpelError};
