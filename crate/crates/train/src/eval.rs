use rand::Rng;

use geodiffussr_core::flow::{cfm_loss_on, draw_cfm, euler_sample_batch, SamplerConfig};
use geodiffussr_core::metrics::{compute_report, FeatureExtractor, MetricsConfig, MetricsReport, PerceptualModel};
use geodiffussr_core::rng::{derive_seed, substream};
use geodiffussr_core::tile::BASE_SIZE;
use geodiffussr_core::unet::UNet;
use geodiffussr_core::{Error, Result, TerrainTile, TextureTile};
use geodiffussr_tensor::Graph;

use crate::prepare::{full_conditioning, texture_batch, Prepared};

const EVAL_CHUNK: usize = 32;

/// Produces one texture per prepared triplet, seeded per record.
pub trait TextureGenerator {
    fn generate(&self, items: &[&Prepared], seeds: &[u64]) -> Result<Vec<TextureTile>>;
}

/// Guided Euler sampling from a trained UNet.
pub struct ModelGenerator<'a> {
    pub unet: &'a UNet<f32>,
    pub sampler: SamplerConfig,
}

impl TextureGenerator for ModelGenerator<'_> {
    fn generate(&self, items: &[&Prepared], seeds: &[u64]) -> Result<Vec<TextureTile>> {
        let guided = self.unet.guided(full_conditioning(items)?);
        euler_sample_batch::<f32, _>(&guided, BASE_SIZE, BASE_SIZE, &self.sampler, seeds)
    }
}

/// Returns the reference texture.
pub struct CheatGenerator;

impl TextureGenerator for CheatGenerator {
    fn generate(&self, items: &[&Prepared], _: &[u64]) -> Result<Vec<TextureTile>> {
        Ok(items.iter().map(|p| p.texture.clone()).collect())
    }
}

/// Uniform per-channel noise.
pub struct NoiseGenerator;

impl TextureGenerator for NoiseGenerator {
    fn generate(&self, items: &[&Prepared], seeds: &[u64]) -> Result<Vec<TextureTile>> {
        items
            .iter()
            .zip(seeds)
            .map(|(p, &s)| {
                let mut rng = substream(s, "noise-generator");
                let n = p.texture.data().len();
                TextureTile::new(p.texture.height(), p.texture.width(), (0..n).map(|_| rng.random::<f32>()).collect())
            })
            .collect()
    }
}

/// Per-record sampling seed.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &format!("eval/{id}"))
}

/// Generated textures for `items`, in order.
pub fn generate_all(generator: &dyn TextureGenerator, items: &[Prepared], seed: u64) -> Result<Vec<TextureTile>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let seeds: Vec<u64> = chunk.iter().map(|p| record_seed(seed, &p.id)).collect();
        out.extend(generator.generate(&refs, &seeds)?);
    }
    Ok(out)
}

/// Samples one texture per item and scores it against the references.
pub fn evaluate(
    generator: &dyn TextureGenerator,
    items: &[Prepared],
    metrics: &MetricsConfig,
    seed: u64,
    features: Option<&dyn FeatureExtractor>,
    perceptual: Option<&dyn PerceptualModel>,
) -> Result<(MetricsReport, Vec<TextureTile>)> {
    if items.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let generated = generate_all(generator, items, seed)?;
    let reference: Vec<TextureTile> = items.iter().map(|p| p.texture.clone()).collect();
    let dems: Vec<TerrainTile> = items.iter().map(|p| p.dem.clone()).collect();
    let report = compute_report(&generated, &reference, &dems, metrics, features, perceptual)?;
    Ok((report, generated))
}

/// Mean conditional flow-matching loss over `items`, with the noise and
/// time of each record fixed by `(seed, id, draw)` so different models see
/// identical draws.
pub fn validation_loss(unet: &UNet<f32>, items: &[Prepared], seed: u64, draws: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let mut total = 0.0;
    for item in items {
        let refs = [item];
        let x1 = texture_batch(&refs)?;
        let cond = full_conditioning(&refs)?;
        for d in 0..draws {
            let draw = draw_cfm(&x1, &mut substream(seed, &format!("val/{}/{d}", item.id)))?;
            let mut g = Graph::new(unet.store(), false);
            let l = cfm_loss_on(&mut g, unet, &draw, &cond, 0)?;
            total += g.value(l).data()[0] as f64;
        }
    }
    Ok(total / (items.len() * draws) as f64)
}
