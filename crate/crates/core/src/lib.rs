//! Arabic offensive-text detection and star-masking.

pub mod corpus;
pub mod detect;
pub mod error;
pub mod history;
pub mod maskgen;
pub mod metrics;
pub mod text;

pub use error::{ModelError, Result};
