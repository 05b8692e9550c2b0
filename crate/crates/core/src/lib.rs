//! Unified garment try-on / try-off diffusion transformer.
//!
//! A garment image and a person image share one horizontally concatenated
//! canvas; a binary mask decides which half is generated. One rectified-flow
//! transformer learns both directions, conditioned on a task token.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthwear;
pub mod train;

pub use error::{Error, Result};
