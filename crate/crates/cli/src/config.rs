//! Run configuration.
//!
//! One JSON file holds a section per command. Precedence, lowest first:
//! built-in defaults, the `--config` file, command-line flags. The
//! top-level `seed` is the only source of randomness and replaces the
//! seeds inside the sections.

use std::path::Path;

use anyhow::{bail, Context};
use geodiffussr_core::data::SynthDatasetConfig;
use geodiffussr_core::flow::SamplerConfig;
use geodiffussr_core::metrics::MetricsConfig;
use geodiffussr_train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory (holding `manifest.json`) for train, eval and ablate.
    pub data: Option<String>,
    pub dataset_synth: SynthDatasetConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub metrics: MetricsConfig,
    pub ablate: AblateSection,
    pub render: RenderSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub checkpoint: Option<String>,
    pub prompt: Option<String>,
    pub dem: Option<String>,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<String>,
    /// `model`, `cheat` or `noise`.
    pub generator: String,
    pub split: String,
    /// Evaluate only the first `limit` records; 0 = all.
    pub limit: usize,
    pub save_samples: bool,
    pub sampler: SamplerConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            generator: "model".into(),
            split: "test".into(),
            limit: 0,
            save_samples: false,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub modes: Vec<String>,
    pub sizes: Vec<String>,
    /// Seeds `seed, seed+1, ...`.
    pub seeds: usize,
    pub eval_tiles: usize,
    pub val_draws: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            modes: vec!["full".into(), "single".into(), "none".into()],
            sizes: Vec::new(),
            seeds: 3,
            eval_tiles: 64,
            val_draws: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub dem: Option<String>,
    pub texture: Option<String>,
    pub factor: usize,
    /// (east, north, up) towards the light.
    pub light_dir: [f64; 3],
    /// Defaults to a quarter of the upscaled tile edge.
    pub z_scale: Option<f64>,
    pub mesh: bool,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self { dem: None, texture: None, factor: 4, light_dir: [-1.0, 1.0, 1.5], z_scale: None, mesh: true }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        match serde_path_to_error::deserialize::<_, RunConfig>(de) {
            Ok(c) => Ok(c),
            Err(e) => {
                let path = e.path().to_string();
                let inner = e.into_inner();
                if path == "." || path.is_empty() {
                    bail!("{inner}")
                }
                bail!("key `{path}`: {inner}")
            }
        }
    }

    /// Pushes the top-level seed into every section.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.train.sampler.seed = self.seed;
        self.sample.sampler.seed = self.seed;
        self.eval.sampler.seed = self.seed;
        self.metrics.subsample_seed = self.seed;
    }
}
