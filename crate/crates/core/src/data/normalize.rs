use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::{ElevationRange, TerrainTile};

/// How raw elevations in metres become `[0, 1]` tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    #[default]
    PerTileMinmax,
    /// `a·raw + b`, clamped to `[0, 1]`.
    GlobalAffine { a: f64, b: f64 },
}

/// Row-major `raw` (`height×width`, metres) to a normalized tile. The raw
/// min/max are kept in the tile's meta.
pub fn normalize_dem(raw: &[f64], height: usize, width: usize, mode: &Normalization) -> Result<TerrainTile> {
    if raw.len() != height * width {
        return Err(Error::Shape(format!("{height}×{width} DEM needs {} values, got {}", height * width, raw.len())));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite DEM pixel {i} (row {}, col {})", i / width, i % width)));
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let meta = ElevationRange { min_elev_m: lo, max_elev_m: hi };
    let values: Vec<f32> = match mode {
        Normalization::PerTileMinmax if hi == lo => {
            log::warn!("flat DEM tile at {lo} m normalized to 0.5");
            vec![0.5; raw.len()]
        }
        Normalization::PerTileMinmax => raw.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect(),
        Normalization::GlobalAffine { a, b } => raw.iter().map(|v| (a * v + b).clamp(0.0, 1.0) as f32).collect(),
    };
    Ok(TerrainTile::new(height, width, values)?.with_meta(meta))
}
