pub mod bounds;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod special;

pub use error::{Error, Result};
