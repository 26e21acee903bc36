//! Mask-guided makeup inpainting.
//!
//! A generator learns a makeup style from a dataset of made-up portraits. Each
//! photo is paired with a binary region mask and a makeup-removed version of
//! itself; the generator sees the bare face and the mask, and its output is
//! pasted back into the photo only where the mask is set.

pub mod adversary;
pub mod compositing;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod face;
pub mod generator;
pub mod image;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
