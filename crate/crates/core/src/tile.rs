//! Elevation and texture grids.

use geodiffussr_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base tile edge length of the generation pipeline.
pub const BASE_SIZE: usize = 32;

/// Elevation range in metres before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElevationRange {
    pub min_elev_m: f64,
    pub max_elev_m: f64,
}

/// Single-channel elevation grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainTile {
    height: usize,
    width: usize,
    elevation: Vec<f32>,
    pub meta: Option<ElevationRange>,
}

impl TerrainTile {
    pub fn new(height: usize, width: usize, elevation: Vec<f32>) -> Result<Self> {
        if elevation.len() != height * width {
            return Err(Error::Shape(format!("{height}×{width} tile needs {} values, got {}", height * width, elevation.len())));
        }
        if let Some(i) = elevation.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange(format!("elevation[{i}] = {} outside [0, 1]", elevation[i])));
        }
        Ok(Self { height, width, elevation, meta: None })
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn with_meta(mut self, meta: ElevationRange) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.elevation
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.elevation[y * self.width + x]
    }

    /// Elevation in metres, when the normalization range is known.
    pub fn denormalized(&self) -> Option<Vec<f64>> {
        let m = self.meta?;
        let span = m.max_elev_m - m.min_elev_m;
        Some(self.elevation.iter().map(|&e| m.min_elev_m + e as f64 * span).collect())
    }

    /// `[h, w, 1]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [self.height, self.width, 1],
            self.elevation.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("consistent tile shape")
    }
}

/// `h × w × 3` RGB grid with values in `[0, 1]`, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureTile {
    height: usize,
    width: usize,
    rgb: Vec<f32>,
}

impl TextureTile {
    pub fn new(height: usize, width: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!("{height}×{width}×3 texture needs {} values, got {}", height * width * 3, rgb.len())));
        }
        if let Some(i) = rgb.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange(format!("texture[{i}] = {} outside [0, 1]", rgb[i])));
        }
        Ok(Self { height, width, rgb })
    }

    /// Clamp arbitrary values into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, rgb: Vec<f32>) -> Result<Self> {
        let rgb = rgb.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(height, width, rgb)
    }

    pub fn constant(height: usize, width: usize, color: [f32; 3]) -> Result<Self> {
        Self::new(height, width, color.iter().copied().cycle().take(height * width * 3).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.rgb
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn same_grid(&self, dem: &TerrainTile) -> bool {
        self.height == dem.height() && self.width == dem.width()
    }

    /// `[h, w, 3]` tensor mapped from `[0, 1]` storage into the model's
    /// `[-1, 1]` range.
    pub fn to_model_range<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [self.height, self.width, 3],
            self.rgb.iter().map(|&v| T::lit(2.0 * v as f64 - 1.0)).collect(),
        )
        .expect("consistent texture shape")
    }

    /// Inverse of [`Self::to_model_range`], clamped to `[0, 1]`.
    pub fn from_model_range<T: Real>(height: usize, width: usize, x: &[T]) -> Result<Self> {
        Self::from_clamped(height, width, x.iter().map(|v| ((v.as_f64() + 1.0) * 0.5) as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_shape() {
        assert!(TerrainTile::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(TerrainTile::new(2, 2, vec![0.0; 3]).is_err());
        assert!(TextureTile::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn model_range_round_trip() {
        let t = TextureTile::new(1, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let m = t.to_model_range::<f64>();
        assert_eq!(m.data()[0], -1.0);
        let back = TextureTile::from_model_range(1, 2, m.data()).unwrap();
        assert_eq!(back, t);
    }
}
