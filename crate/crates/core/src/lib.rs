//! Content-aware image restoration pipeline engine.
//!
//! An input image is split into isolated objects and a background plate
//! (detection + background removal, or instance segmentation), each piece
//! is restored independently through a pluggable inpainting backend, and
//! the pieces are recomposed as an editable, depth-layered scene. Every
//! stage writes its images and a digest manifest into a run directory, so
//! a run can be inspected and replayed.

pub mod backends;
pub mod compose;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod isolate;
pub mod restore;
pub mod runner;
pub mod store;

pub use error::{Error, Result};
