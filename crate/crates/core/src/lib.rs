pub mod archive;
pub mod error;
pub mod image;

pub use error::{Error, Result};
pub mod synth;
pub mod gan;
pub mod inversion;
pub mod pipeline;
pub mod detect;
pub mod identity;
