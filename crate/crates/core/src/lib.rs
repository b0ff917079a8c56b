//! Backlit-image enhancement with learned prompt pairs over a frozen
//! vision-language backbone.

pub mod blob;
pub mod data;
pub mod enhancer;
pub mod error;
mod fastconv;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod toy;
pub mod trainer;
pub mod vlm;

pub use error::{Error, Result};
