use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use geodiffussr_core::container::Container;
use geodiffussr_core::data::BatchStream;
use geodiffussr_core::flow::cfm_loss_and_grads;
use geodiffussr_core::rng::{derive_seed, substream};
use geodiffussr_core::text::{cfg_dropout, TextEmbedding};
use geodiffussr_core::unet::UNet;
use geodiffussr_core::{Error, Result};
use geodiffussr_tensor::ParamStore;

use crate::config::TrainConfig;
use crate::optim::{ema_update, AdamW};
use crate::prepare::{conditioning, texture_batch, Prepared};

pub const CHECKPOINT_KIND: &str = "geodiffussr-checkpoint";

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
    param_checksum: String,
    rng: RngState,
    losses: Vec<f32>,
}

/// All per-step randomness is drawn from streams keyed by the seed and the
/// step index, so the pair is the complete RNG state.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: u64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub unet: UNet<f32>,
    pub ema: Option<ParamStore<f32>>,
    opt: AdamW,
    step: u64,
    stream: BatchStream,
    losses: Vec<f32>,
    pub rows: Vec<LogRow>,
    started: Instant,
}

fn checksum_hex(store: &ParamStore<f32>) -> String {
    format!("{:016x}", store.checksum())
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(cfg.unet.clone(), derive_seed(cfg.seed, "unet/init"))?;
        let opt = AdamW::new(unet.store(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        let ema = cfg.ema_decay.map(|_| unet.store().clone());
        let stream = BatchStream::over(train_len, cfg.batch_size, derive_seed(cfg.seed, "train/batches"))?;
        Ok(Self { cfg, unet, ema, opt, step: 0, stream, losses: Vec::new(), rows: Vec::new(), started: Instant::now() })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Loss of every completed step, including those before a resume.
    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    /// One optimizer step on the next batch of `train`.
    pub fn train_step(&mut self, train: &[Prepared]) -> Result<f32> {
        let k = self.step;
        let idx = self.stream.next_batch();
        let items: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
        let mut rng = substream(self.cfg.seed, &format!("train/step{k}"));
        let dropped: Vec<TextEmbedding> = items.iter().map(|p| cfg_dropout(&p.text, self.cfg.cfg_dropout_p, &mut rng)).collect();
        let texts: Vec<&TextEmbedding> = dropped.iter().collect();
        let cond = conditioning(&items, &texts)?;
        let x1 = texture_batch(&items)?;
        let (loss, grads) = cfm_loss_and_grads(&self.unet, &x1, &cond, &mut rng, k as usize)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite { what: "gradient".into(), step: k as usize });
        }
        let lr = self.cfg.lr_at(k);
        self.opt.step(self.unet.store_mut(), &grads, lr);
        if let (Some(ema), Some(d)) = (self.ema.as_mut(), self.cfg.ema_decay) {
            ema_update(ema, self.unet.store(), d);
        }
        self.step += 1;
        self.losses.push(loss);
        let row = LogRow { step: self.step, loss, lr, wall_time: self.started.elapsed().as_secs_f64() };
        log::debug!("step {} loss {:.5} lr {:.2e}", row.step, row.loss, row.lr);
        self.rows.push(row);
        Ok(loss)
    }

    /// Trains until `cfg.max_steps`, checkpointing every `eval_every` steps
    /// and at the end when `out` is given. A non-finite loss aborts the run;
    /// the last checkpoint written stays on disk.
    pub fn run(&mut self, train: &[Prepared], out: Option<&Path>) -> Result<()> {
        let mut log_file = match out {
            Some(dir) => Some(open_log(dir, self.step > 0)?),
            None => None,
        };
        while self.step < self.cfg.max_steps {
            let loss = self.train_step(train)?;
            if let Some(f) = log_file.as_mut() {
                use std::io::Write;
                let r = self.rows.last().expect("row just pushed");
                writeln!(f, "{},{},{},{:.3}", r.step, r.loss, r.lr, r.wall_time).map_err(|e| Error::Io { path: "train_log.csv".into(), source: e })?;
            }
            if self.step % 100 == 0 {
                log::info!("step {}/{} loss {loss:.4}", self.step, self.cfg.max_steps);
            }
            let due = self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0;
            if let (Some(dir), true) = (out, due || self.step == self.cfg.max_steps) {
                self.save_checkpoint(&checkpoint_path(dir))?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            step: self.step,
            adam_t: self.opt.t,
            config: self.cfg.clone(),
            param_checksum: checksum_hex(self.unet.store()),
            rng: RngState { seed: self.cfg.seed, next_step: self.step },
            losses: self.losses.clone(),
        };
        let mut c = Container::new(serde_json::to_value(&meta)?);
        for (id, p) in self.unet.store().iter() {
            c.push(format!("param/{}", p.name), &p.value);
            c.push(format!("adam_m/{}", p.name), &self.opt.m[id.0]);
            c.push(format!("adam_v/{}", p.name), &self.opt.v[id.0]);
            if let Some(ema) = &self.ema {
                c.push(format!("ema/{}", p.name), ema.value(id));
            }
        }
        c.save(path)
    }

    /// Restores weights, optimizer moments, EMA, step counter and the
    /// batch stream position. `max_steps` may be raised to continue.
    pub fn resume(path: &Path, max_steps: Option<u64>, train_len: usize) -> Result<Self> {
        let c = Container::load(path)?;
        let mut meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Weights(format!("{} is not a training checkpoint", path.display())));
        }
        if let Some(m) = max_steps {
            meta.config.max_steps = m;
        }
        let mut t = Self::new(meta.config, train_len)?;
        load_into(&c, "param", t.unet.store_mut())?;
        if checksum_hex(t.unet.store()) != meta.param_checksum {
            return Err(Error::Weights(format!("{}: parameter checksum mismatch", path.display())));
        }
        for (id, p) in t.unet.store().iter() {
            t.opt.m[id.0] = c.get(&format!("adam_m/{}", p.name))?;
            t.opt.v[id.0] = c.get(&format!("adam_v/{}", p.name))?;
        }
        if let Some(ema) = t.ema.as_mut() {
            load_into(&c, "ema", ema)?;
        }
        t.opt.t = meta.adam_t;
        t.step = meta.step;
        t.stream.skip_batches(meta.step);
        t.losses = meta.losses;
        Ok(t)
    }

    /// The weights used for sampling: EMA if tracked, else the raw weights.
    pub fn inference_model(&self) -> UNet<f32> {
        let mut m = self.unet.clone();
        if let Some(ema) = &self.ema {
            *m.store_mut() = ema.clone();
        }
        m
    }
}

fn load_into(c: &Container, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}/{}", store.get(id).name);
        if !c.contains(&name) {
            return Err(Error::Weights(format!("checkpoint lacks tensor `{name}`")));
        }
        store.set(id, c.get(&name)?)?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.gdt")
}

fn open_log(dir: &Path, append: bool) -> Result<std::fs::File> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let path = dir.join("train_log.csv");
    let io = |e| Error::Io { path: path.clone(), source: e };
    let fresh = !append || !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path).map_err(io)?;
    if fresh {
        writeln!(f, "step,loss,lr,wall_time").map_err(io)?;
    }
    Ok(f)
}

/// Model config and inference weights from a checkpoint.
pub fn load_model(path: &Path) -> Result<(TrainConfig, UNet<f32>)> {
    let c = Container::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Weights(format!("{} is not a training checkpoint", path.display())));
    }
    let mut unet = UNet::new(meta.config.unet.clone(), 0)?;
    let prefix = if meta.config.ema_decay.is_some() { "ema" } else { "param" };
    load_into(&c, prefix, unet.store_mut())?;
    Ok((meta.config, unet))
}
