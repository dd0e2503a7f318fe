//! Loads a split once and caches everything the model consumes: DEM
//! feature pyramids, text embeddings and tensors in model range.

use std::path::Path;

use geodiffussr_core::data::{load_split, LoadedTriplet, Manifest, Split};
use geodiffussr_core::encoder::{load_encoder_weights, DemEncoder, EncoderPreset, FeaturePyramid};
use geodiffussr_core::text::{provider_from_key, TextBatch, TextEmbedding, TextProvider};
use geodiffussr_core::unet::{stack_dems, stack_pyramids, Conditioning};
use geodiffussr_core::{Error, Result, TerrainTile, TextureTile};
use geodiffussr_tensor::Tensor;

use crate::config::TrainConfig;

/// One triplet ready for the model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub biome: String,
    pub caption: String,
    pub dem: TerrainTile,
    pub texture: TextureTile,
    pub pyramid: FeaturePyramid,
    pub text: TextEmbedding,
}

/// Frozen encoder and text provider built from a training config.
pub struct Conditioners {
    pub encoder: DemEncoder,
    pub text: Box<dyn TextProvider>,
}

impl Conditioners {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let preset = EncoderPreset::parse(&cfg.encoder)?;
        let encoder = match &cfg.encoder_weights {
            Some(p) => load_encoder_weights(Path::new(p), preset)?,
            None if preset == EncoderPreset::TinySeeded => DemEncoder::tiny_seeded(),
            None => return Err(Error::Weights(format!("encoder `{}` needs encoder_weights", cfg.encoder))),
        };
        if encoder.channels() != cfg.unet.dem_channels {
            return Err(Error::Config(format!(
                "unet.dem_channels {:?} do not match the {} encoder's {:?}",
                cfg.unet.dem_channels,
                preset.name(),
                encoder.channels()
            )));
        }
        let text = provider_from_key(&cfg.text_provider, cfg.unet.text_dim, cfg.seed)?;
        Ok(Self { encoder, text })
    }

    pub fn prepare(&self, triplets: Vec<LoadedTriplet>) -> Result<Vec<Prepared>> {
        let dems: Vec<&TerrainTile> = triplets.iter().map(|t| &t.dem).collect();
        let pyramids = self.encoder.encode_batch(&dems)?;
        triplets
            .into_iter()
            .zip(pyramids)
            .map(|(t, pyramid)| {
                Ok(Prepared {
                    text: self.text.embed(&t.record.caption)?,
                    id: t.record.id,
                    biome: t.record.biome,
                    caption: t.record.caption,
                    dem: t.dem,
                    texture: t.texture,
                    pyramid,
                })
            })
            .collect()
    }

    pub fn load(&self, m: &Manifest, root: &Path, split: Split) -> Result<Vec<Prepared>> {
        let t = load_split(m, root, split)?;
        if t.is_empty() {
            return Err(Error::EmptySplit(split.name().into()));
        }
        self.prepare(t)
    }
}

/// Model-range texture batch `[n, h, w, 3]`.
pub fn texture_batch(items: &[&Prepared]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = items.iter().map(|p| p.texture.to_model_range::<f32>()).collect();
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

/// Conditioning for `items`, with `texts` overriding their embeddings
/// (used for dropout).
pub fn conditioning(items: &[&Prepared], texts: &[&TextEmbedding]) -> Result<Conditioning<f32>> {
    let pyr: Vec<&FeaturePyramid> = items.iter().map(|p| &p.pyramid).collect();
    let dems: Vec<&TerrainTile> = items.iter().map(|p| &p.dem).collect();
    Ok(Conditioning { text: Some(TextBatch::from_embeddings(texts)?), pyramid: Some(stack_pyramids(&pyr)?), dem: Some(stack_dems(&dems)?) })
}

pub fn full_conditioning(items: &[&Prepared]) -> Result<Conditioning<f32>> {
    let texts: Vec<&TextEmbedding> = items.iter().map(|p| &p.text).collect();
    conditioning(items, &texts)
}
