use geodiffussr_core::{TerrainTile, TextureTile};

use crate::{RenderError, Result};

pub const SUBDIVISION_FACTORS: [usize; 3] = [2, 4, 8];

/// Bilinear subdivision. Source sample `(i, j)` lands on `(i·f, j·f)`;
/// rows and columns past the last lattice point repeat the edge.
pub fn subdivide_dem(dem: &TerrainTile, factor: usize) -> Result<TerrainTile> {
    if !SUBDIVISION_FACTORS.contains(&factor) {
        return Err(RenderError::Factor(factor));
    }
    let (h, w) = (dem.height(), dem.width());
    let (oh, ow) = (h * factor, w * factor);
    let src = dem.data();
    let f = factor as f64;
    let taps = |o: usize, n: usize| -> (usize, usize, f64) {
        let i0 = (o / factor).min(n - 1);
        if i0 == n - 1 {
            return (i0, i0, 0.0);
        }
        (i0, i0 + 1, (o % factor) as f64 / f)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, b) = taps(y, h);
        for x in 0..ow {
            let (x0, x1, a) = taps(x, w);
            let v00 = src[y0 * w + x0] as f64;
            let v01 = src[y0 * w + x1] as f64;
            let v10 = src[y1 * w + x0] as f64;
            let v11 = src[y1 * w + x1] as f64;
            let v = if a == 0.0 && b == 0.0 {
                v00
            } else {
                (1.0 - b) * ((1.0 - a) * v00 + a * v01) + b * ((1.0 - a) * v10 + a * v11)
            };
            out.push(v as f32);
        }
    }
    let mut tile = TerrainTile::new(oh, ow, out)?;
    tile.meta = dem.meta;
    Ok(tile)
}

/// Super-resolution back end for textures.
pub trait Upsampler {
    fn name(&self) -> &str;
    fn upscale(&self, texture: &TextureTile, factor: usize) -> Result<TextureTile>;
}

/// Keys cubic convolution (a = −0.5), pixel-centre aligned, edge clamped.
pub struct Bicubic;

impl Upsampler for Bicubic {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn upscale(&self, texture: &TextureTile, factor: usize) -> Result<TextureTile> {
        bicubic(texture, factor)
    }
}

pub(crate) fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

// per output index: four source indices and weights
fn kernel_rows(n: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = s.floor();
            let mut idx = [0; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let p = base + k as f64 - 1.0;
                idx[k] = p.clamp(0.0, (n - 1) as f64) as usize;
                wts[k] = keys(s - p);
            }
            (idx, wts)
        })
        .collect()
}

pub fn bicubic(texture: &TextureTile, factor: usize) -> Result<TextureTile> {
    if factor == 0 {
        return Err(RenderError::Factor(factor));
    }
    let (h, w) = (texture.height(), texture.width());
    let (oh, ow) = (h * factor, w * factor);
    let src = texture.data();
    let cols = kernel_rows(w, factor);
    let rows = kernel_rows(h, factor);

    let mut tmp = vec![0.0f64; h * ow * 3];
    for y in 0..h {
        for (x, (idx, wts)) in cols.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * src[(y * w + idx[k]) * 3 + c] as f64;
                }
                tmp[(y * ow + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; oh * ow * 3];
    for (y, (idx, wts)) in rows.iter().enumerate() {
        for x in 0..ow {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * tmp[(idx[k] * ow + x) * 3 + c];
                }
                out[(y * ow + x) * 3 + c] = acc as f32;
            }
        }
    }
    Ok(TextureTile::from_clamped(oh, ow, out)?)
}

/// Upscales with `upsampler`, falling back to bicubic when it fails or
/// returns the wrong shape.
pub fn upscale_texture(texture: &TextureTile, factor: usize, upsampler: Option<&dyn Upsampler>) -> Result<TextureTile> {
    if let Some(up) = upsampler {
        match up.upscale(texture, factor) {
            Ok(t) if t.height() == texture.height() * factor && t.width() == texture.width() * factor => return Ok(t),
            Ok(t) => log::warn!(
                "upsampler `{}` returned {}×{}, expected {}×{}; using bicubic",
                up.name(),
                t.height(),
                t.width(),
                texture.height() * factor,
                texture.width() * factor
            ),
            Err(e) => log::warn!("upsampler `{}` failed ({e}); using bicubic", up.name()),
        }
    }
    bicubic(texture, factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_partition_of_unity() {
        for i in 0..100 {
            let s = i as f64 / 100.0;
            let sum: f64 = (-1..3).map(|k| keys(s - k as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
    }
}
