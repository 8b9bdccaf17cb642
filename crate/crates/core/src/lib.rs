//! Simulation, decoding and adaptation for a magnetic tactile skin.
//!
//! A skin is a thin elastomer loaded with magnetized particles sitting above a
//! board of five three-axis magnetometers. Pressing the skin moves the particles
//! and changes the field at each chip. This crate simulates that field, frames it
//! on a wire protocol, generates datasets, trains a contact decoder and adapts it
//! to new skins without labels.

// `!(x > 0.0)` is how NaN gets rejected along with the non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod field_sim;
pub mod hashing;
pub mod neural;
pub mod protocol;

pub use error::{Error, Result};
