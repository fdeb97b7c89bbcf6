//! Tree-structured concept reasoning for image-caption compositionality.
//!
//! A caption is split into entities by a language model, each entity is
//! expanded breadth-first into verifiable visual concepts, every concept is
//! scored for linguistic and visual relevance, and the best root-to-leaf
//! path adjusts a vision-language model's base score.

pub mod backends;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod image;
pub mod prompts;
pub mod rules;
pub mod search;
pub mod tree;

pub use error::{Error, Result};
