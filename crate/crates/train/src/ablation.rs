use std::collections::HashMap;
use std::fmt::Write as _;

use geodiffussr_core::metrics::{FeatureExtractor, MetricsConfig, MetricsReport};
use geodiffussr_core::unet::{count_parameters, McaMode, SizePreset, UNetConfig};
use geodiffussr_core::{Error, Result};

use crate::config::TrainConfig;
use crate::eval::{evaluate, validation_loss, ModelGenerator};
use crate::prepare::Prepared;
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationSpec {
    pub modes: Vec<McaMode>,
    pub sizes: Vec<SizePreset>,
    pub seeds: Vec<u64>,
    /// Validation tiles sampled per run for the metrics (0 = all).
    pub eval_tiles: usize,
    pub val_draws: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            modes: vec![McaMode::Full, McaMode::Single16, McaMode::None],
            sizes: vec![SizePreset::S, SizePreset::M, SizePreset::L],
            seeds: vec![0, 1, 2],
            eval_tiles: 64,
            val_draws: 2,
        }
    }
}

/// Outcome of one trained variant under one seed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub val_loss: Option<f64>,
    pub final_train_loss: Option<f32>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: Option<McaMode>,
    pub size: Option<SizePreset>,
    pub parameters: Option<usize>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub mse: Option<f64>,
    pub delta_dcor: Option<f64>,
    pub val_loss: Option<f64>,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    pub fn fixture(variant: &str, fid: f64, lpips: f64, mse: f64, delta_dcor: f64) -> Self {
        Self {
            variant: variant.into(),
            mode: None,
            size: None,
            parameters: None,
            fid: Some(fid),
            lpips: Some(lpips),
            mse: Some(mse),
            delta_dcor: Some(delta_dcor),
            val_loss: None,
            runs: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn mode_label(m: McaMode) -> &'static str {
    match m {
        McaMode::Full => "Full MCA",
        McaMode::Single16 => "Single MCA",
        McaMode::None => "Non-MCA",
    }
}

pub fn size_label(s: SizePreset) -> String {
    format!("Size {}", s.label())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| format!("{v}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "none" | "" => Ok(None),
        v => v.parse().map(Some).map_err(|_| Error::Config(format!("bad number `{v}` in table"))),
    }
}

pub const TABLE_HEADER: &str = "variant,fid(desk),lpips,mse,delta_dcor";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TABLE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let status = if r.failed() { " [failed]" } else { "" };
            writeln!(s, "{}{status},{},{},{},{}", r.variant, fmt_opt(r.fid), fmt_opt(r.lpips), fmt_opt(r.mse), fmt_opt(r.delta_dcor)).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TABLE_HEADER) {
            return Err(Error::Config(format!("table header must be `{TABLE_HEADER}`")));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("table row needs 5 fields: `{line}`")));
            }
            rows.push(AblationRow {
                fid: parse_opt(f[1])?,
                lpips: parse_opt(f[2])?,
                mse: parse_opt(f[3])?,
                delta_dcor: parse_opt(f[4])?,
                ..AblationRow::fixture(f[0], 0.0, 0.0, 0.0, 0.0)
            });
        }
        Ok(Self { rows })
    }

    /// One metric per seed: `variant,seed_<s>...,mean`.
    pub fn seed_csv(&self, metric: &str) -> Result<String> {
        let pick = |r: &RunResult| -> Option<f64> {
            match metric {
                "val_loss" => r.val_loss,
                "train_loss" => r.final_train_loss.map(f64::from),
                m => r.report.as_ref().and_then(|rep| match m {
                    "mse" => Some(rep.mse),
                    "delta_dcor" => Some(rep.delta_dcor),
                    "dcor" => Some(rep.dcor),
                    "fid" => rep.fid,
                    _ => None,
                }),
            }
        };
        if !matches!(metric, "val_loss" | "train_loss" | "mse" | "delta_dcor" | "dcor" | "fid") {
            return Err(Error::Unknown { kind: "metric", name: metric.into() });
        }
        let seeds: Vec<u64> = self.rows.first().map(|r| r.runs.iter().map(|x| x.seed).collect()).unwrap_or_default();
        let mut s = String::from("variant");
        for sd in &seeds {
            write!(s, ",seed_{sd}").unwrap();
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            s.push_str(&r.variant);
            let vals: Vec<Option<f64>> = r.runs.iter().map(pick).collect();
            for v in &vals {
                write!(s, ",{}", fmt_opt(*v)).unwrap();
            }
            writeln!(s, ",{}", fmt_opt(mean(vals.iter().copied()))).unwrap();
        }
        Ok(s)
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains one variant and scores it on `val`.
pub fn run_variant(
    cfg: &TrainConfig,
    train: &[Prepared],
    val: &[Prepared],
    spec: &AblationSpec,
    metrics: &MetricsConfig,
    features: Option<&dyn FeatureExtractor>,
) -> Result<RunResult> {
    let mut t = Trainer::new(cfg.clone(), train.len())?;
    t.run(train, None)?;
    let model = t.inference_model();
    let val_loss = validation_loss(&model, val, cfg.seed ^ 0x5EED, spec.val_draws.max(1))?;
    let eval_items = if spec.eval_tiles == 0 { val } else { &val[..spec.eval_tiles.min(val.len())] };
    let generator = ModelGenerator { unet: &model, sampler: cfg.sampler.clone() };
    let (report, _) = evaluate(&generator, eval_items, metrics, cfg.sampler.seed, features, None)?;
    let tail = &t.losses()[t.losses().len().saturating_sub(50)..];
    let final_train_loss = Some(tail.iter().sum::<f32>() / tail.len().max(1) as f32);
    Ok(RunResult { seed: cfg.seed, report: Some(report), val_loss: Some(val_loss), final_train_loss, error: None })
}

/// Variant config: `base` with the mode and size preset replaced. The
/// validation/eval protocol and data are shared across variants.
pub fn variant_config(base: &TrainConfig, mode: McaMode, size: SizePreset, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    let b = &base.unet;
    let mut u = UNetConfig::preset(size, mode, b.text_dim, b.dem_channels);
    u.zero_init_output = b.zero_init_output;
    u.se_reduction = b.se_reduction;
    cfg.unet = u;
    cfg.seed = seed;
    cfg
}

/// Trains every mode row (at the base size) and every size row (at the
/// base mode) for each seed. A (mode, size, seed) combination shared by a
/// mode row and a size row is trained once. Failed runs are recorded and
/// the harness moves on.
pub fn ablation_run(
    base: &TrainConfig,
    spec: &AblationSpec,
    train: &[Prepared],
    val: &[Prepared],
    metrics: &MetricsConfig,
    features: Option<&dyn FeatureExtractor>,
) -> AblationTable {
    let mut cache: HashMap<(McaMode, SizePreset, u64), RunResult> = HashMap::new();
    let mut rows = Vec::new();
    let base_mode = base.unet.mca_mode;
    let base_size = base.unet.size_preset;
    let variants: Vec<(String, McaMode, SizePreset, bool)> = spec
        .modes
        .iter()
        .map(|&m| (mode_label(m).to_string(), m, base_size, true))
        .chain(spec.sizes.iter().map(|&s| (size_label(s), base_mode, s, false)))
        .collect();
    for (label, mode, size, is_mode_row) in variants {
        let mut runs = Vec::new();
        for &seed in &spec.seeds {
            let key = (mode, size, seed);
            let r = cache.entry(key).or_insert_with(|| {
                let cfg = variant_config(base, mode, size, seed);
                log::info!("ablation: training {label} seed {seed}");
                run_variant(&cfg, train, val, spec, metrics, features).unwrap_or_else(|e| {
                    log::error!("ablation run {label} seed {seed} failed: {e}");
                    RunResult { seed, report: None, val_loss: None, final_train_loss: None, error: Some(e.to_string()) }
                })
            });
            runs.push(r.clone());
        }
        let reports = || runs.iter().map(|r| r.report.as_ref());
        let cfg = variant_config(base, mode, size, 0);
        rows.push(AblationRow {
            variant: label,
            mode: is_mode_row.then_some(mode),
            size: (!is_mode_row).then_some(size),
            parameters: count_parameters(&cfg.unet).ok(),
            fid: mean(reports().map(|r| r.and_then(|r| r.fid))),
            lpips: mean(reports().map(|r| r.and_then(|r| r.lpips))),
            mse: mean(reports().map(|r| r.map(|r| r.mse))),
            delta_dcor: mean(reports().map(|r| r.map(|r| r.delta_dcor))),
            val_loss: mean(runs.iter().map(|r| r.val_loss)),
            runs,
        });
    }
    AblationTable { rows }
}
