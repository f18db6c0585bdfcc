pub mod analysis;
pub mod corpus;
pub mod decoding;
pub mod denoiser;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
