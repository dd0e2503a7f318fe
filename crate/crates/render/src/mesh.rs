use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use geodiffussr_core::data::write_texture_png;
use geodiffussr_core::{TerrainTile, TextureTile};

use crate::{RenderError, Result};

/// Regular-grid triangle mesh. Vertex `(i, j)` sits at
/// `(j, H−1−i, elevation·z_scale)`; each cell is split along its
/// top-left to bottom-right diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightfieldMesh {
    pub vertices: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub faces: Vec<[u32; 3]>,
}

pub fn heightfield_mesh(dem: &TerrainTile, z_scale: f64) -> Result<HeightfieldMesh> {
    let (h, w) = (dem.height(), dem.width());
    if h < 2 || w < 2 {
        return Err(RenderError::Shape(format!("mesh needs at least 2×2 samples, got {h}×{w}")));
    }
    let mut vertices = Vec::with_capacity(h * w);
    let mut uv = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            vertices.push([j as f64, (h - 1 - i) as f64, dem.at(i, j) as f64 * z_scale]);
            uv.push([j as f64 / (w - 1) as f64, 1.0 - i as f64 / (h - 1) as f64]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (h - 1) * (w - 1));
    let id = |i: usize, j: usize| (i * w + j) as u32;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            // counter-clockwise seen from above
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Ok(HeightfieldMesh { vertices, uv, faces })
}

impl HeightfieldMesh {
    pub fn to_obj(&self, mtl_name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mtllib {mtl_name}\nusemtl terrain");
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.uv {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        for f in &self.faces {
            let [a, b, c] = f.map(|i| i + 1);
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct MeshFiles {
    pub obj: PathBuf,
    pub mtl: PathBuf,
    pub texture: PathBuf,
}

/// Writes `<stem>.obj`, `<stem>.mtl` and `<stem>.png` into `dir`.
pub fn export_mesh(dem: &TerrainTile, texture: &TextureTile, z_scale: f64, dir: &Path, stem: &str) -> Result<MeshFiles> {
    let mesh = heightfield_mesh(dem, z_scale)?;
    std::fs::create_dir_all(dir).map_err(|source| RenderError::Io { path: dir.to_path_buf(), source })?;
    let files = MeshFiles {
        obj: dir.join(format!("{stem}.obj")),
        mtl: dir.join(format!("{stem}.mtl")),
        texture: dir.join(format!("{stem}.png")),
    };
    let mtl = format!("newmtl terrain\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nd 1\nillum 1\nmap_Kd {stem}.png\n");
    let write = |p: &Path, body: &str| std::fs::write(p, body).map_err(|source| RenderError::Io { path: p.to_path_buf(), source });
    write(&files.obj, &mesh.to_obj(&format!("{stem}.mtl")))?;
    write(&files.mtl, &mtl)?;
    write_texture_png(&files.texture, texture)?;
    Ok(files)
}
