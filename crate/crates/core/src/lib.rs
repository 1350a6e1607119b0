//! Single-object tracking with a two-stage ViT student distilled from a
//! one-stream teacher.

pub mod backbone;
pub mod boxfile;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod head;
pub mod imaging;
pub mod numerics;
pub mod objective;
pub mod tracker;

pub use error::{Error, Result};
