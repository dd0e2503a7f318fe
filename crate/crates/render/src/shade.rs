use std::path::Path;

use geodiffussr_core::{TerrainTile, TextureTile};
use image::RgbImage;

use crate::{RenderError, Result};

pub const ZENITH: [f64; 3] = [0.0, 0.0, 1.0];

/// Orthographic top-down preview. Columns run east, rows run south and
/// `light_dir` is given as (east, north, up) pointing towards the light.
/// Elevation is scaled by `z_scale` in pixel units before taking normals.
pub fn hillshade_render(dem: &TerrainTile, texture: &TextureTile, light_dir: [f64; 3], z_scale: f64) -> Result<RgbImage> {
    let norm = light_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(RenderError::LightDir(light_dir));
    }
    if !texture.same_grid(dem) {
        return Err(RenderError::Shape(format!(
            "texture {}×{} vs DEM {}×{}",
            texture.height(),
            texture.width(),
            dem.height(),
            dem.width()
        )));
    }
    let l = light_dir.map(|v| v / norm);
    let (h, w) = (dem.height(), dem.width());
    let z = |y: usize, x: usize| dem.at(y, x) as f64 * z_scale;
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };

    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let (ya, yb) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let dzdx = diff(z(y, xa), z(y, xb), xb - xa);
            // north is up the image
            let dzdn = -diff(z(ya, x), z(yb, x), yb - ya);
            let n = [-dzdx, -dzdn, 1.0];
            let nl = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            let shade = ((n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / nl).max(0.0);
            let p = texture.pixel(y, x);
            let px = p.map(|c| (c as f64 * shade * 255.0).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn save_preview(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| RenderError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
