pub mod binsim;
pub mod bvh;
pub mod correspondence;
pub mod desceval;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod imageio;
pub mod mesh;
pub mod nn;
pub mod policy;
pub mod render;
pub mod scenegen;
pub mod texture;

pub use error::{Error, Result};
