pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod rng;
pub mod text;
pub mod unet;
pub mod tile;

pub use error::{Error, Result};
pub use tile::{ElevationRange, TerrainTile, TextureTile};
