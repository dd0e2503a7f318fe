use serde::{Deserialize, Serialize};

use geodiffussr_core::flow::SamplerConfig;
use geodiffussr_core::text::DEFAULT_DROPOUT_P;
use geodiffussr_core::unet::{McaMode, SizePreset, UNetConfig};
use geodiffussr_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to zero at `max_steps`.
    Cosine { warmup_steps: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub cfg_dropout_p: f64,
    pub seed: u64,
    pub unet: UNetConfig,
    pub sampler: SamplerConfig,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub eval_every: u64,
    pub lr_schedule: LrSchedule,
    /// EMA decay of the weights, if any.
    pub ema_decay: Option<f64>,
    /// `hash` or `cache:<dir>`.
    pub text_provider: String,
    /// `tiny-seeded` or `vgg16`.
    pub encoder: String,
    pub encoder_weights: Option<String>,
}

pub const DEFAULT_TEXT_DIM: usize = 32;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_steps: 2000,
            cfg_dropout_p: DEFAULT_DROPOUT_P,
            seed: 0,
            unet: UNetConfig::preset(SizePreset::S, McaMode::Full, DEFAULT_TEXT_DIM, [16, 32, 64]),
            sampler: SamplerConfig::default(),
            eval_every: 500,
            lr_schedule: LrSchedule::Constant,
            ema_decay: None,
            text_provider: "hash".into(),
            encoder: "tiny-seeded".into(),
            encoder_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.max_steps < 1 {
            return bad("max_steps must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_p) {
            return bad(format!("cfg_dropout_p must lie in [0, 1], got {}", self.cfg_dropout_p));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("weight_decay ≥ 0, betas in [0, 1) and eps > 0 required".into());
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay must lie in [0, 1), got {d}"));
            }
        }
        self.sampler.validate()?;
        self.unet.validate()
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    self.lr * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = (self.max_steps.saturating_sub(warmup_steps)).max(1) as f64;
                    let p = ((step - warmup_steps) as f64 / span).min(1.0);
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}
