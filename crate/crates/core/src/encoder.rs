//! Frozen VGG-style convolutional encoder producing the three-level DEM
//! feature pyramid consumed by multi-scale content aggregation.

use std::path::Path;

use geodiffussr_tensor::kernels::{conv2d_forward, max_pool2, ConvGeom};
use geodiffussr_tensor::{ParamId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tile::{TerrainTile, TextureTile, BASE_SIZE};

/// Fixed seed of the `tiny-seeded` preset.
pub const TINY_SEED: u64 = 0x7e44_a1e5_eed5;

/// Spatial size of each pyramid level for a base tile.
pub const PYRAMID_SIZES: [usize; 3] = [BASE_SIZE, BASE_SIZE / 2, BASE_SIZE / 4];

const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// Two convolutions per block, 16/32/64 channels, seeded weights.
    TinySeeded,
    /// First three blocks of VGG-16 (2/2/3 convolutions, 64/128/256 channels).
    Vgg16,
}

impl EncoderPreset {
    /// `(convolutions, channels)` per block.
    pub fn blocks(self) -> [(usize, usize); 3] {
        match self {
            Self::TinySeeded => [(2, 16), (2, 32), (2, 64)],
            Self::Vgg16 => [(2, 64), (2, 128), (3, 256)],
        }
    }

    pub fn channels(self) -> [usize; 3] {
        let b = self.blocks();
        [b[0].1, b[1].1, b[2].1]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TinySeeded => "tiny-seeded",
            Self::Vgg16 => "vgg16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny-seeded" => Ok(Self::TinySeeded),
            "vgg16" => Ok(Self::Vgg16),
            _ => Err(Error::Unknown { kind: "encoder preset", name: s.into() }),
        }
    }

    /// Layer names and shapes in file order.
    pub fn layer_shapes(self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("normalize.mean".to_string(), vec![3]), ("normalize.std".to_string(), vec![3])];
        let mut cin = 3;
        for (bi, (convs, ch)) in self.blocks().into_iter().enumerate() {
            for ci in 0..convs {
                out.push((format!("block{bi}.conv{ci}.weight"), vec![3, 3, cin, ch]));
                out.push((format!("block{bi}.conv{ci}.bias"), vec![ch]));
                cin = ch;
            }
        }
        out
    }
}

/// DEM features at 32², 16² and 8², each `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor<f32>; 3],
}

impl FeaturePyramid {
    pub fn shapes(&self) -> [Vec<usize>; 3] {
        [self.levels[0].shape().to_vec(), self.levels[1].shape().to_vec(), self.levels[2].shape().to_vec()]
    }

    pub fn max_abs(&self) -> f32 {
        self.levels.iter().map(|l| l.max_abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.all_finite())
    }
}

/// Immutable after construction; weights never receive gradients.
#[derive(Clone, Debug)]
pub struct DemEncoder {
    preset: EncoderPreset,
    store: ParamStore<f32>,
    layers: Vec<Vec<(ParamId, ParamId)>>,
    mean: ParamId,
    std: ParamId,
}

impl DemEncoder {
    /// Deterministic He-initialized weights for the `tiny-seeded` preset.
    pub fn tiny_seeded() -> Self {
        Self::seeded(EncoderPreset::TinySeeded, TINY_SEED)
    }

    /// Seeded random weights for any preset.
    pub fn seeded(preset: EncoderPreset, seed: u64) -> Self {
        let mut store = ParamStore::new();
        for (name, shape) in preset.layer_shapes() {
            let n: usize = shape.iter().product();
            let value = if name == "normalize.mean" {
                vec![0.5; 3]
            } else if name == "normalize.std" {
                vec![0.25; 3]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let mut rng = substream(seed, &name);
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            store.add_frozen(name, Tensor::from_vec(shape, value).expect("preset shape"));
        }
        Self::from_store(preset, store)
    }

    fn from_store(preset: EncoderPreset, store: ParamStore<f32>) -> Self {
        let id = |n: &str| store.find(n).expect("layer registered");
        let layers = preset
            .blocks()
            .iter()
            .enumerate()
            .map(|(bi, (convs, _))| {
                (0..*convs)
                    .map(|ci| (id(&format!("block{bi}.conv{ci}.weight")), id(&format!("block{bi}.conv{ci}.bias"))))
                    .collect()
            })
            .collect();
        let (mean, std) = (id("normalize.mean"), id("normalize.std"));
        Self { preset, store, layers, mean, std }
    }

    pub fn preset(&self) -> EncoderPreset {
        self.preset
    }

    pub fn channels(&self) -> [usize; 3] {
        self.preset.channels()
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Digest of every weight, recorded in saved weight files.
    pub fn checksum(&self) -> String {
        format!("{:016x}", self.store.checksum())
    }

    /// Number of 3×3 convolutions before the tap of `level`.
    pub fn convs_before_tap(&self, level: usize) -> usize {
        self.preset.blocks()[..=level].iter().map(|b| b.0).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "dem-encoder",
            "preset": self.preset.name(),
            "param_checksum": self.checksum(),
        }));
        for (_, p) in self.store.iter() {
            c.push(&p.name, &p.value);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    /// Load a weight file for `preset`; every layer must be present with the
    /// preset's shape.
    pub fn from_container(c: &Container, preset: EncoderPreset) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, shape) in preset.layer_shapes() {
            if !c.contains(&name) {
                return Err(Error::Weights(format!("layer `{name}` missing")));
            }
            let t = c.get::<f32>(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Weights(format!(
                    "layer `{name}` has shape {:?}, preset {} expects {:?}",
                    t.shape(),
                    preset.name(),
                    shape
                )));
            }
            store.add_frozen(name, t);
        }
        let enc = Self::from_store(preset, store);
        if let Some(sum) = c.meta.get("param_checksum").and_then(|v| v.as_str()) {
            if sum != enc.checksum() {
                return Err(Error::Weights(format!("parameter checksum {} does not match header {sum}", enc.checksum())));
            }
        }
        Ok(enc)
    }

    /// Encode a batch of 3-channel images `[n, 32, 32, 3]` (flat) into
    /// per-image pyramids.
    fn encode_images(&self, images: &[f32], n: usize) -> Vec<FeaturePyramid> {
        let s = BASE_SIZE;
        let mean = self.store.value(self.mean).data();
        let std = self.store.value(self.std).data();
        let mut x: Vec<f32> = images.chunks_exact(3).flat_map(|p| (0..3).map(move |c| (p[c] - mean[c]) / std[c])).collect();
        let (mut size, mut cin) = (s, 3);
        let mut taps: Vec<(Vec<f32>, usize, usize)> = Vec::with_capacity(3);
        for (bi, block) in self.layers.iter().enumerate() {
            if bi > 0 {
                x = max_pool2(&x, n, size, size, cin);
                size /= 2;
            }
            for &(w, b) in block {
                let wt = self.store.value(w);
                let cout = wt.last_dim();
                let g = ConvGeom { n, h: size, w: size, cin, cout, k: 3 };
                let (mut y, _) = conv2d_forward(&x, wt.data(), Some(self.store.value(b).data()), g);
                y.iter_mut().for_each(|v| *v = v.max(0.0));
                x = y;
                cin = cout;
            }
            taps.push((x.clone(), size, cin));
        }
        (0..n)
            .map(|i| {
                let level = |(data, size, c): &(Vec<f32>, usize, usize)| {
                    let per = size * size * c;
                    Tensor::from_vec([*size, *size, *c], data[i * per..(i + 1) * per].to_vec()).expect("tap shape")
                };
                FeaturePyramid { levels: [level(&taps[0]), level(&taps[1]), level(&taps[2])] }
            })
            .collect()
    }

    fn check_dem(dem: &TerrainTile) -> Result<()> {
        if dem.height() != BASE_SIZE || dem.width() != BASE_SIZE {
            return Err(Error::Shape(format!(
                "DEM encoder expects {BASE_SIZE}×{BASE_SIZE}, got {}×{}",
                dem.height(),
                dem.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, dem: &TerrainTile) -> Result<FeaturePyramid> {
        Ok(self.encode_batch(&[dem])?.remove(0))
    }

    /// Elevation replicated to three channels, then the frozen stack.
    pub fn encode_batch(&self, dems: &[&TerrainTile]) -> Result<Vec<FeaturePyramid>> {
        let mut out = Vec::with_capacity(dems.len());
        for chunk in dems.chunks(ENCODE_CHUNK) {
            let mut img = Vec::with_capacity(chunk.len() * BASE_SIZE * BASE_SIZE * 3);
            for d in chunk {
                Self::check_dem(d)?;
                img.extend(d.data().iter().flat_map(|&e| [e, e, e]));
            }
            out.extend(self.encode_images(&img, chunk.len()));
        }
        Ok(out)
    }

    /// RGB textures through the same trunk (used for desk FID features).
    pub fn encode_rgb_batch(&self, textures: &[&TextureTile]) -> Result<Vec<FeaturePyramid>> {
        let mut out = Vec::with_capacity(textures.len());
        for chunk in textures.chunks(ENCODE_CHUNK) {
            let mut img = Vec::with_capacity(chunk.len() * BASE_SIZE * BASE_SIZE * 3);
            for t in chunk {
                if t.height() != BASE_SIZE || t.width() != BASE_SIZE {
                    return Err(Error::Shape(format!("encoder expects {BASE_SIZE}×{BASE_SIZE} textures")));
                }
                img.extend_from_slice(t.data());
            }
            out.extend(self.encode_images(&img, chunk.len()));
        }
        Ok(out)
    }
}

/// Load frozen encoder weights. A missing file falls back to seeded weights
/// only for the `tiny-seeded` preset.
pub fn load_encoder_weights(path: &Path, preset: EncoderPreset) -> Result<DemEncoder> {
    if !path.exists() {
        return match preset {
            EncoderPreset::TinySeeded => {
                log::info!("{} not found; using seeded tiny encoder", path.display());
                Ok(DemEncoder::tiny_seeded())
            }
            EncoderPreset::Vgg16 => Err(Error::Weights(format!("{} not found", path.display()))),
        };
    }
    DemEncoder::from_container(&Container::load(path)?, preset)
}
