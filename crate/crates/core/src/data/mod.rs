//! Triplet datasets: schema, normalization, splitting, batching, storage
//! and a procedural generator.

mod io;
mod manifest;
mod normalize;
mod synth;

pub use io::*;
pub use manifest::*;
pub use normalize::*;
pub use synth::*;
