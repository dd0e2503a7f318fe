//! Procedural DEM/texture/caption triplets with a tunable height–appearance
//! coupling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix64, substream};
use crate::tile::{ElevationRange, TerrainTile, TextureTile, BASE_SIZE};

use super::normalize::{normalize_dem, Normalization};

/// Coupling that puts the default corpus near a mean dCor of 0.38.
pub const DEFAULT_COUPLING: f64 = 0.325;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Biome {
    Alpine,
    Desert,
    Forest,
    Tundra,
    Coast,
    Volcanic,
}

pub const BIOMES: [Biome; 6] = [Biome::Alpine, Biome::Desert, Biome::Forest, Biome::Tundra, Biome::Coast, Biome::Volcanic];

type Stops = &'static [(f64, [f64; 3])];

struct Variant {
    stops: Stops,
    caption: &'static str,
}

struct Preset {
    octaves: usize,
    ridged: bool,
    persistence: f64,
    base_m: f64,
    relief_m: f64,
    variants: [Variant; 2],
}

impl Biome {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpine => "alpine",
            Self::Desert => "desert",
            Self::Forest => "forest",
            Self::Tundra => "tundra",
            Self::Coast => "coast",
            Self::Volcanic => "volcanic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        BIOMES
            .iter()
            .copied()
            .find(|b| b.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown { kind: "biome preset", name: s.into() })
    }

    fn preset(self) -> Preset {
        match self {
            Self::Alpine => Preset {
                octaves: 5,
                ridged: true,
                persistence: 0.55,
                base_m: 1400.0,
                relief_m: 2600.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.10, 0.22, 0.12]), (0.45, [0.35, 0.36, 0.30]), (0.7, [0.58, 0.57, 0.55]), (1.0, [0.97, 0.97, 0.99])],
                        caption: "snow-capped ridges above dark conifer valleys",
                    },
                    Variant {
                        stops: &[(0.0, [0.22, 0.30, 0.14]), (0.5, [0.45, 0.42, 0.34]), (1.0, [0.72, 0.68, 0.62])],
                        caption: "bare grey rock ridges over grassy alpine meadows",
                    },
                ],
            },
            Self::Desert => Preset {
                octaves: 3,
                ridged: false,
                persistence: 0.4,
                base_m: 200.0,
                relief_m: 500.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.62, 0.45, 0.28]), (0.6, [0.82, 0.66, 0.42]), (1.0, [0.93, 0.82, 0.60])],
                        caption: "wind-swept sand dunes in pale ochre",
                    },
                    Variant {
                        stops: &[(0.0, [0.45, 0.25, 0.16]), (0.5, [0.66, 0.40, 0.24]), (1.0, [0.80, 0.58, 0.38])],
                        caption: "red sandstone mesas over a dry plain",
                    },
                ],
            },
            Self::Forest => Preset {
                octaves: 4,
                ridged: false,
                persistence: 0.5,
                base_m: 300.0,
                relief_m: 900.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.05, 0.18, 0.08]), (0.6, [0.12, 0.32, 0.12]), (1.0, [0.30, 0.45, 0.22])],
                        caption: "dense green forest on rolling hills",
                    },
                    Variant {
                        stops: &[(0.0, [0.30, 0.20, 0.08]), (0.5, [0.55, 0.35, 0.10]), (1.0, [0.72, 0.55, 0.20])],
                        caption: "autumn woodland in orange and brown",
                    },
                ],
            },
            Self::Tundra => Preset {
                octaves: 3,
                ridged: false,
                persistence: 0.45,
                base_m: 100.0,
                relief_m: 400.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.42, 0.44, 0.36]), (0.6, [0.60, 0.60, 0.52]), (1.0, [0.86, 0.87, 0.88])],
                        caption: "frost-covered tundra with patchy lichen",
                    },
                    Variant {
                        stops: &[(0.0, [0.30, 0.34, 0.22]), (0.6, [0.48, 0.46, 0.30]), (1.0, [0.62, 0.58, 0.44])],
                        caption: "summer tundra of moss and low shrubs",
                    },
                ],
            },
            Self::Coast => Preset {
                octaves: 4,
                ridged: false,
                persistence: 0.5,
                base_m: 0.0,
                relief_m: 300.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.05, 0.20, 0.45]), (0.35, [0.15, 0.45, 0.62]), (0.45, [0.85, 0.80, 0.62]), (1.0, [0.25, 0.48, 0.22])],
                        caption: "blue sea meeting sandy beaches and green cliffs",
                    },
                    Variant {
                        stops: &[(0.0, [0.08, 0.25, 0.30]), (0.4, [0.30, 0.40, 0.35]), (1.0, [0.55, 0.52, 0.45])],
                        caption: "grey rocky shoreline with shallow water",
                    },
                ],
            },
            Self::Volcanic => Preset {
                octaves: 5,
                ridged: true,
                persistence: 0.6,
                base_m: 500.0,
                relief_m: 2200.0,
                variants: [
                    Variant {
                        stops: &[(0.0, [0.10, 0.09, 0.09]), (0.6, [0.28, 0.22, 0.20]), (1.0, [0.55, 0.25, 0.12])],
                        caption: "black lava fields rising to a rust-red crater",
                    },
                    Variant {
                        stops: &[(0.0, [0.20, 0.32, 0.16]), (0.5, [0.32, 0.30, 0.26]), (1.0, [0.42, 0.40, 0.38])],
                        caption: "ash-grey volcanic slopes above green lowlands",
                    },
                ],
            },
        }
    }
}

/// Knobs for [`synth_triplet`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// 1 = colour follows elevation, 0 = colour follows an independent field.
    pub coupling: f64,
    /// Scales slope shading and per-pixel chroma jitter; 0 disables both.
    pub noise: f64,
    pub size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { coupling: DEFAULT_COUPLING, noise: 1.0, size: BASE_SIZE }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) || !(self.noise >= 0.0) || self.size < 4 {
            return Err(Error::Config(format!(
                "synth params need coupling in [0, 1], noise ≥ 0 and size ≥ 4, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthTriplet {
    pub dem: TerrainTile,
    pub texture: TextureTile,
    pub caption: String,
    pub biome: Biome,
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let key = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    let h = mix64(seed ^ mix64(key));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    top + (bot - top) * fy
}

const COVER_CYCLES: f64 = 10.0;

/// Multi-octave value noise on a `size×size` grid, `cycles` lattice cells
/// across the first octave.
pub fn fbm(seed: u64, size: usize, cycles: f64, octaves: usize, persistence: f64, ridged: bool) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let base = cycles / size as f64;
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        let freq = base * (1 << o) as f64;
        let oseed = mix64(seed.wrapping_add(o as u64));
        for y in 0..size {
            for x in 0..size {
                let mut n = value_noise(oseed, x as f64 * freq, y as f64 * freq);
                if ridged {
                    n = 1.0 - (2.0 * n - 1.0).abs();
                }
                out[y * size + x] += amp * n;
            }
        }
        total += amp;
        amp *= persistence;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn palette(stops: Stops, e: f64) -> [f64; 3] {
    let e = e.clamp(0.0, 1.0);
    for w in stops.windows(2) {
        let ((p0, c0), (p1, c1)) = (w[0], w[1]);
        if e <= p1 {
            let t = if p1 > p0 { (e - p0) / (p1 - p0) } else { 0.0 };
            return [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * t);
        }
    }
    stops[stops.len() - 1].1
}

fn minmax01(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r = (hi - lo).max(1e-12);
    v.iter().map(|x| (x - lo) / r).collect()
}

/// Lambertian shading from a light in the north-west at 45° elevation,
/// centred so flat ground maps to 0.
fn shade(e: &[f64], size: usize, relief: f64) -> Vec<f64> {
    let at = |x: isize, y: isize| e[(y.clamp(0, size as isize - 1) as usize) * size + x.clamp(0, size as isize - 1) as usize];
    let l = [-0.5f64, -0.5, 0.7071];
    let flat = l[2];
    let mut out = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let dx = (at(x + 1, y) - at(x - 1, y)) * 0.5 * relief;
            let dy = (at(x, y + 1) - at(x, y - 1)) * 0.5 * relief;
            let n = [-dx, -dy, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            let lam = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / len;
            out[y as usize * size + x as usize] = lam.max(0.0) - flat;
        }
    }
    out
}

/// Deterministic triplet for `(seed, biome)`.
pub fn synth_triplet(seed: u64, biome: Biome, params: &SynthParams) -> Result<SynthTriplet> {
    params.validate()?;
    let p = biome.preset();
    let size = params.size;
    let tag = |s: &str| mix64(seed ^ crate::rng::fnv1a64(format!("{}/{s}", biome.name()).as_bytes()));
    let height = fbm(tag("dem"), size, 3.0, p.octaves, p.persistence, p.ridged);
    let mut rng = substream(seed, &format!("synth/{}", biome.name()));
    let relief_scale: f64 = rng.random_range(0.6..1.0);
    let raw: Vec<f64> = height.iter().map(|h| p.base_m + p.relief_m * relief_scale * h).collect();
    let dem = normalize_dem(&raw, size, size, &Normalization::PerTileMinmax)?;
    let e: Vec<f64> = dem.data().iter().map(|&v| v as f64).collect();

    let variant = &p.variants[rng.random_range(0..2)];
    let indep = minmax01(&fbm(tag("cover"), size, COVER_CYCLES, 3, 0.6, false));
    let c = params.coupling;
    let shading = shade(&e, size, 6.0 * relief_scale);
    let mut jitter = substream(seed, &format!("synth/{}/jitter", biome.name()));
    let mut rgb = Vec::with_capacity(size * size * 3);
    for i in 0..size * size {
        let drive = c * e[i] + (1.0 - c) * indep[i];
        let base = palette(variant.stops, drive);
        let s = 1.0 + params.noise * 0.35 * c * shading[i];
        for ch in base {
            let j = if params.noise > 0.0 { params.noise * 0.03 * (jitter.random::<f64>() - 0.5) } else { 0.0 };
            rgb.push((ch * s + j) as f32);
        }
    }
    let texture = TextureTile::from_clamped(size, size, rgb)?;
    let relief = raw_relief(dem.meta.as_ref());
    let caption = format!("{}, {relief}", variant.caption);
    Ok(SynthTriplet { dem, texture, caption, biome })
}

fn raw_relief(meta: Option<&ElevationRange>) -> &'static str {
    match meta.map(|m| m.max_elev_m - m.min_elev_m) {
        Some(r) if r > 1500.0 => "steep high relief",
        Some(r) if r > 400.0 => "moderate relief",
        _ => "gentle low relief",
    }
}
