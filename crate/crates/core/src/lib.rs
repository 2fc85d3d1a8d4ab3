pub mod analysis;
pub mod autograd;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod event_stream;
pub mod featurizer;
pub mod objectives;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
