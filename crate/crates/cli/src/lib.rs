//! `geodiffussr` command-line pipeline: dataset synthesis, training,
//! sampling, evaluation, ablation and preview rendering.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use geodiffussr_core::data::{load_manifest, read_dem_png, read_texture_png, synth_dataset, write_texture_png, Split};
use geodiffussr_core::encoder::DemEncoder;
use geodiffussr_core::metrics::{DeskFeatures, FeatureExtractor};
use geodiffussr_core::rng::derive_seed;
use geodiffussr_core::unet::{count_parameters, McaMode, SizePreset};
use geodiffussr_core::TextureTile;
use geodiffussr_render::{default_z_scale, export_mesh, hillshade_render, save_preview, subdivide_dem, upscale_texture};
use geodiffussr_train::train::checkpoint_path;
use geodiffussr_train::*;
use serde::Serialize;
use serde_json::json;

pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "geodiffussr", version, about = "DEM-conditioned terrain texture generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic DEM/texture/caption corpus with a manifest.
    DatasetSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        coupling: Option<f64>,
        /// Comma-separated biome presets.
        #[arg(long, value_delimiter = ',')]
        biomes: Option<Vec<String>>,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        size: Option<String>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one texture for a prompt and a DEM.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        dem: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Score a generator on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        /// model, cheat or noise.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and score MCA-mode and size variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<String>>,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        eval_tiles: Option<usize>,
        #[arg(long)]
        sampler_steps: Option<usize>,
    },
    /// Upscale, hillshade and mesh a DEM/texture pair.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dem: Option<String>,
        #[arg(long)]
        texture: Option<String>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        z_scale: Option<f64>,
        /// east,north,up
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        light: Option<Vec<f64>>,
        #[arg(long)]
        no_mesh: bool,
    },
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(common.seed);
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("effective_config.json"), cfg)
}

fn required<'a>(v: &'a Option<String>, key: &str) -> anyhow::Result<&'a str> {
    v.as_deref().ok_or_else(|| anyhow!("missing `{key}` (set it in the config or pass the flag)"))
}

fn features_for(cfg: &RunConfig) -> Option<Box<dyn FeatureExtractor>> {
    (cfg.metrics.feature_extractor == "desk").then(|| Box::new(DeskFeatures::new(DemEncoder::tiny_seeded())) as Box<dyn FeatureExtractor>)
}

fn dataset(cfg: &RunConfig) -> anyhow::Result<(PathBuf, geodiffussr_core::data::Manifest)> {
    let root = PathBuf::from(required(&cfg.data, "data")?);
    let m = load_manifest(&root.join("manifest.json")).with_context(|| format!("dataset {}", root.display()))?;
    Ok((root, m))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::DatasetSynth { common, count, coupling, biomes } => {
            let mut cfg = base_config(&common)?;
            let d = &mut cfg.dataset_synth;
            if let Some(n) = count {
                d.count = n;
            }
            if let Some(c) = coupling {
                d.params.coupling = c;
            }
            if let Some(b) = biomes {
                d.biomes = b;
            }
            d.params.validate()?;
            prepare_out(&common.out, &cfg)?;
            let m = synth_dataset(&common.out, &cfg.dataset_synth, cfg.seed)?;
            let mut per_biome = BTreeMap::new();
            let mut splits = BTreeMap::new();
            for r in &m.records {
                *per_biome.entry(r.biome.clone()).or_insert(0usize) += 1;
                *splits.entry(r.split.name().to_string()).or_insert(0usize) += 1;
            }
            write_json(
                &common.out.join("result.json"),
                &json!({ "count": m.records.len(), "per_biome": per_biome, "splits": splits, "manifest": "manifest.json" }),
            )?;
            log::info!("wrote {} triplets to {}", m.records.len(), common.out.display());
        }
        Command::Train { common, data, steps, batch_size, mode, size, resume } => {
            let mut cfg = base_config(&common)?;
            if data.is_some() {
                cfg.data = data;
            }
            let t = &mut cfg.train;
            if let Some(s) = steps {
                t.max_steps = s;
            }
            if let Some(b) = batch_size {
                t.batch_size = b;
            }
            if mode.is_some() || size.is_some() {
                let m = mode.as_deref().map(McaMode::parse).transpose()?.unwrap_or(t.unet.mca_mode);
                let s = size.as_deref().map(SizePreset::parse).transpose()?.unwrap_or(t.unet.size_preset);
                *t = ablation::variant_config(t, m, s, t.seed);
            }
            t.validate()?;
            let (root, m) = dataset(&cfg)?;
            prepare_out(&common.out, &cfg)?;
            let cond = Conditioners::from_config(&cfg.train)?;
            let train = cond.load(&m, &root, Split::Train)?;
            let mut trainer = match &resume {
                Some(p) => Trainer::resume(p, Some(cfg.train.max_steps), train.len())?,
                None => Trainer::new(cfg.train.clone(), train.len())?,
            };
            trainer.run(&train, Some(&common.out))?;
            let losses = trainer.losses();
            write_json(
                &common.out.join("result.json"),
                &json!({
                    "steps": trainer.step(),
                    "train_records": train.len(),
                    "parameters": count_parameters(&cfg.train.unet)?,
                    "first_loss": losses.first(),
                    "final_loss": losses.last(),
                    "checkpoint": checkpoint_path(&common.out),
                    "resumed_from": resume,
                }),
            )?;
        }
        Command::Sample { common, checkpoint, prompt, dem, steps, cfg_scale } => {
            let mut cfg = base_config(&common)?;
            let s = &mut cfg.sample;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            if prompt.is_some() {
                s.prompt = prompt;
            }
            if dem.is_some() {
                s.dem = dem;
            }
            if let Some(n) = steps {
                s.sampler.steps = n;
            }
            if let Some(w) = cfg_scale {
                s.sampler.cfg_scale = w;
            }
            s.sampler.validate()?;
            let ckpt = required(&s.checkpoint, "sample.checkpoint")?.to_string();
            let prompt = required(&s.prompt, "sample.prompt")?.to_string();
            let dem_path = required(&s.dem, "sample.dem")?.to_string();
            let prompt = prompt.as_str();
            let (train_cfg, unet) = load_model(Path::new(&ckpt))?;
            let dem = read_dem_png(Path::new(&dem_path))?;
            let r = train_cfg.unet.resolution;
            if dem.height() != r || dem.width() != r {
                bail!("DEM is {}×{}, the model expects {r}×{r}", dem.height(), dem.width());
            }
            prepare_out(&common.out, &cfg)?;
            let cond = Conditioners::from_config(&train_cfg)?;
            let item = Prepared {
                id: "sample".into(),
                biome: String::new(),
                caption: prompt.to_string(),
                pyramid: cond.encoder.encode(&dem)?,
                text: cond.text.embed(prompt)?,
                texture: TextureTile::constant(r, r, [0.5; 3])?,
                dem,
            };
            let generator = ModelGenerator { unet: &unet, sampler: cfg.sample.sampler.clone() };
            let tex = generator.generate(&[&item], &[derive_seed(cfg.seed, "sample")])?.remove(0);
            let png = common.out.join("sample.png");
            write_texture_png(&png, &tex)?;
            write_json(&common.out.join("result.json"), &json!({ "image": "sample.png", "prompt": prompt, "steps": cfg.sample.sampler.steps }))?;
        }
        Command::Eval { common, data, checkpoint, generator, split, limit, steps } => {
            let mut cfg = base_config(&common)?;
            if data.is_some() {
                cfg.data = data;
            }
            let e = &mut cfg.eval;
            if checkpoint.is_some() {
                e.checkpoint = checkpoint;
            }
            if let Some(g) = generator {
                e.generator = g;
            }
            if let Some(s) = split {
                e.split = s;
            }
            if let Some(l) = limit {
                e.limit = l;
            }
            if let Some(n) = steps {
                e.sampler.steps = n;
            }
            cfg.metrics.validate()?;
            let split = Split::parse(&cfg.eval.split)?;
            let model = match cfg.eval.generator.as_str() {
                "model" => Some(load_model(Path::new(required(&cfg.eval.checkpoint, "eval.checkpoint")?))?),
                "cheat" | "noise" => None,
                g => bail!("key `eval.generator`: unknown generator `{g}` (model, cheat or noise)"),
            };
            let (root, m) = dataset(&cfg)?;
            prepare_out(&common.out, &cfg)?;
            let cond_cfg = model.as_ref().map(|(c, _)| c).unwrap_or(&cfg.train);
            let mut items = Conditioners::from_config(cond_cfg)?.load(&m, &root, split)?;
            if cfg.eval.limit > 0 {
                items.truncate(cfg.eval.limit);
            }
            let features = features_for(&cfg);
            let gen: Box<dyn TextureGenerator + '_> = match &model {
                Some((_, unet)) => Box::new(ModelGenerator { unet, sampler: cfg.eval.sampler.clone() }),
                None if cfg.eval.generator == "cheat" => Box::new(CheatGenerator),
                None => Box::new(NoiseGenerator),
            };
            let (report, generated) = evaluate(gen.as_ref(), &items, &cfg.metrics, cfg.seed, features.as_deref(), None)?;
            if cfg.eval.save_samples {
                let dir = common.out.join("samples");
                std::fs::create_dir_all(&dir)?;
                for (item, tex) in items.iter().zip(&generated) {
                    write_texture_png(&dir.join(format!("{}.png", item.id)), tex)?;
                }
            }
            write_json(&common.out.join("result.json"), &json!({ "generator": cfg.eval.generator, "split": cfg.eval.split, "report": report }))?;
            log::info!("mse {:.5}, delta dcor {:.5}", report.mse, report.delta_dcor);
        }
        Command::Ablate { common, data, modes, sizes, seeds, steps, eval_tiles, sampler_steps } => {
            let mut cfg = base_config(&common)?;
            if data.is_some() {
                cfg.data = data;
            }
            let a = &mut cfg.ablate;
            if let Some(m) = modes {
                a.modes = m;
            }
            if let Some(s) = sizes {
                a.sizes = s;
            }
            if let Some(n) = seeds {
                a.seeds = n;
            }
            if let Some(n) = eval_tiles {
                a.eval_tiles = n;
            }
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(n) = sampler_steps {
                cfg.train.sampler.steps = n;
            }
            cfg.train.validate()?;
            cfg.metrics.validate()?;
            if cfg.ablate.seeds == 0 {
                bail!("key `ablate.seeds`: need at least one seed");
            }
            let spec = AblationSpec {
                modes: cfg.ablate.modes.iter().map(|m| McaMode::parse(m)).collect::<Result<_, _>>()?,
                sizes: cfg.ablate.sizes.iter().map(|s| SizePreset::parse(s)).collect::<Result<_, _>>()?,
                seeds: (0..cfg.ablate.seeds as u64).map(|k| cfg.seed + k).collect(),
                eval_tiles: cfg.ablate.eval_tiles,
                val_draws: cfg.ablate.val_draws,
            };
            let (root, m) = dataset(&cfg)?;
            prepare_out(&common.out, &cfg)?;
            let cond = Conditioners::from_config(&cfg.train)?;
            let train = cond.load(&m, &root, Split::Train)?;
            let val = cond.load(&m, &root, Split::Val)?;
            let features = features_for(&cfg);
            let table = ablation_run(&cfg.train, &spec, &train, &val, &cfg.metrics, features.as_deref());
            std::fs::write(common.out.join("table.csv"), table.to_csv())?;
            for metric in ["delta_dcor", "mse", "fid", "val_loss", "train_loss"] {
                std::fs::write(common.out.join(format!("seeds_{metric}.csv")), table.seed_csv(metric)?)?;
            }
            write_json(&common.out.join("result.json"), &json!({ "rows": table.rows }))?;
            if table.rows.iter().all(|r| r.failed()) {
                bail!("every ablation run failed; see result.json");
            }
        }
        Command::Render { common, dem, texture, factor, z_scale, light, no_mesh } => {
            let mut cfg = base_config(&common)?;
            let r = &mut cfg.render;
            if dem.is_some() {
                r.dem = dem;
            }
            if texture.is_some() {
                r.texture = texture;
            }
            if let Some(f) = factor {
                r.factor = f;
            }
            if z_scale.is_some() {
                r.z_scale = z_scale;
            }
            if let Some(l) = light {
                if l.len() != 3 {
                    bail!("--light needs three comma-separated values, got {}", l.len());
                }
                r.light_dir = [l[0], l[1], l[2]];
            }
            if no_mesh {
                r.mesh = false;
            }
            let r = cfg.render.clone();
            let dem = read_dem_png(Path::new(required(&r.dem, "render.dem")?))?;
            let tex = read_texture_png(Path::new(required(&r.texture, "render.texture")?))?;
            prepare_out(&common.out, &cfg)?;
            let (dem, tex) = if r.factor == 1 {
                (dem, tex)
            } else {
                let d = subdivide_dem(&dem, r.factor)?;
                let tf = d.height() / tex.height().max(1);
                let t = if tf <= 1 { tex } else { upscale_texture(&tex, tf, None)? };
                (d, t)
            };
            let z = r.z_scale.unwrap_or_else(|| default_z_scale(dem.height(), dem.width()));
            let img = hillshade_render(&dem, &tex, r.light_dir, z)?;
            save_preview(&img, &common.out.join("preview.png"))?;
            let mesh = if r.mesh {
                let f = export_mesh(&dem, &tex, z, &common.out, "terrain")?;
                Some(json!({ "obj": f.obj, "mtl": f.mtl, "texture": f.texture }))
            } else {
                None
            };
            write_json(
                &common.out.join("result.json"),
                &json!({ "preview": "preview.png", "width": dem.width(), "height": dem.height(), "z_scale": z, "light_dir": r.light_dir, "mesh": mesh }),
            )?;
        }
    }
    Ok(())
}

