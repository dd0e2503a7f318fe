//! PNG tile storage and on-disk dataset layout.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{io_err, Error, Result};
use crate::rng::derive_seed;
use crate::tile::{ElevationRange, TerrainTile, TextureTile};

use super::manifest::{stratified_split, write_manifest, Manifest, Split, TripletRecord};
use super::synth::{synth_triplet, Biome, SynthParams, BIOMES};

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |e| Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// 16-bit grayscale PNG plus a `.json` sidecar with the elevation range.
pub fn write_dem_png(path: &Path, dem: &TerrainTile) -> Result<()> {
    let px: Vec<u16> = dem.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(dem.width() as u32, dem.height() as u32, px).expect("buffer size");
    buf.save(path).map_err(img_err(path))?;
    if let Some(meta) = &dem.meta {
        let p = sidecar(path);
        std::fs::write(&p, serde_json::to_string(meta)?).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn read_dem_png(path: &Path) -> Result<TerrainTile> {
    let img = image::open(path).map_err(img_err(path))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    let mut tile = TerrainTile::new(h as usize, w as usize, data)?;
    let p = sidecar(path);
    if p.exists() {
        let meta: ElevationRange = serde_json::from_str(&std::fs::read_to_string(&p).map_err(io_err(&p))?)?;
        tile = tile.with_meta(meta);
    }
    Ok(tile)
}

/// 8-bit RGB PNG.
pub fn texture_png_bytes(tex: &TextureTile) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    texture_buffer(tex).write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image { path: PathBuf::new(), message: e.to_string() })?;
    Ok(out.into_inner())
}

fn texture_buffer(tex: &TextureTile) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let px: Vec<u8> = tex.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(tex.width() as u32, tex.height() as u32, px).expect("buffer size")
}

pub fn write_texture_png(path: &Path, tex: &TextureTile) -> Result<()> {
    texture_buffer(tex).save(path).map_err(img_err(path))
}

pub fn read_texture_png(path: &Path) -> Result<TextureTile> {
    let img = image::open(path).map_err(img_err(path))?.into_rgb8();
    let (w, h) = img.dimensions();
    TextureTile::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

/// A record with its tiles in memory.
#[derive(Clone, Debug)]
pub struct LoadedTriplet {
    pub record: TripletRecord,
    pub dem: TerrainTile,
    pub texture: TextureTile,
}

/// Loads every record of `split`; paths resolve against `root` (the
/// manifest's directory).
pub fn load_split(m: &Manifest, root: &Path, split: Split) -> Result<Vec<LoadedTriplet>> {
    m.split_records(split)
        .into_iter()
        .map(|r| {
            Ok(LoadedTriplet {
                dem: read_dem_png(&root.join(&r.dem_path))?,
                texture: read_texture_png(&root.join(&r.image_path))?,
                record: r.clone(),
            })
        })
        .collect()
}

/// Writes one triplet into the `dems/`, `images/`, `captions/` layout and
/// returns its record (split unassigned).
pub fn write_triplet(root: &Path, id: &str, dem: &TerrainTile, tex: &TextureTile, caption: &str, biome: &str) -> Result<TripletRecord> {
    for d in ["dems", "images", "captions"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let rec = TripletRecord {
        id: id.into(),
        dem_path: format!("dems/{id}.png"),
        image_path: format!("images/{id}.png"),
        caption: caption.into(),
        biome: biome.into(),
        aoi_id: format!("synth-{id}"),
        split: Split::Unassigned,
    };
    write_dem_png(&root.join(&rec.dem_path), dem)?;
    write_texture_png(&root.join(&rec.image_path), tex)?;
    let cp = root.join(format!("captions/{id}.txt"));
    std::fs::write(&cp, caption).map_err(io_err(&cp))?;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub params: SynthParams,
    pub ratios: [f64; 3],
    /// Biome presets used round-robin; empty means all of them.
    pub biomes: Vec<String>,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self { count: 2400, params: SynthParams::default(), ratios: [0.8, 0.1, 0.1], biomes: Vec::new() }
    }
}

/// Generates `cfg.count` triplets cycling through the biome presets,
/// splits them per biome and writes `manifest.json` under `root`.
pub fn synth_dataset(root: &Path, cfg: &SynthDatasetConfig, seed: u64) -> Result<Manifest> {
    let biomes: Vec<Biome> = if cfg.biomes.is_empty() {
        BIOMES.to_vec()
    } else {
        cfg.biomes.iter().map(|b| Biome::parse(b)).collect::<Result<_>>()?
    };
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let biome = biomes[i % biomes.len()];
        let t = synth_triplet(derive_seed(seed, &format!("triplet/{i}")), biome, &cfg.params)?;
        records.push(write_triplet(root, &format!("{i:06}"), &t.dem, &t.texture, &t.caption, biome.name())?);
    }
    let m = stratified_split(&Manifest::new(records), cfg.ratios, seed, &[])?;
    write_manifest(&m, &root.join("manifest.json"))?;
    Ok(m)
}
