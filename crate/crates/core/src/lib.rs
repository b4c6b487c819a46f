pub mod activations;
pub mod analysis;
pub mod attribution;
pub mod clt;
pub mod container;
pub mod corpus;
pub mod error;
pub mod intervene;
pub mod linalg;
pub mod params;
pub mod pipeline;
pub mod tinylm;

pub use error::{Error, Result};
