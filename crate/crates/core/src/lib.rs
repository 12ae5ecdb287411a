//! Cloth-changing person re-identification with multi-information prompt
//! learning: learnable identity and clothing prompts, clothing information
//! stripping, bio-guided attention and dual-length hybrid patches on top of a
//! small patch transformer.

pub mod bga;
pub mod checkpoint;
pub mod cis;
pub mod config;
pub mod data;
pub mod dhp;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prompt_bank;
pub mod trainer;

pub use error::{Error, Result};
