//! Preview rendering for terrain textures.
//!
//! A generated texture and its DEM are upscaled, shaded with a Lambertian
//! light model and optionally exported as a heightfield mesh.

mod mesh;
mod shade;
mod upscale;

use std::path::PathBuf;

pub use mesh::{export_mesh, heightfield_mesh, HeightfieldMesh, MeshFiles};
pub use shade::{hillshade_render, save_preview, ZENITH};
pub use upscale::{bicubic, subdivide_dem, upscale_texture, Bicubic, Upsampler, SUBDIVISION_FACTORS};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("subdivision factor {0} not in {{2, 4, 8}}")]
    Factor(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("light direction must be a finite non-zero vector, got {0:?}")]
    LightDir([f64; 3]),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] geodiffussr_core::Error),
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;

/// Vertical exaggeration used when none is given: the full normalized
/// relief spans a quarter of the tile edge.
pub fn default_z_scale(height: usize, width: usize) -> f64 {
    0.25 * height.max(width) as f64
}
