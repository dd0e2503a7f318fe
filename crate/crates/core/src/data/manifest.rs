use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::substream;

use super::normalize::Normalization;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "unassigned" => Ok(Self::Unassigned),
            _ => Err(Error::Unknown { kind: "split", name: s.into() }),
        }
    }
}

/// One DEM/image/caption triplet. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub id: String,
    pub dem_path: String,
    pub image_path: String,
    pub caption: String,
    pub biome: String,
    pub aoi_id: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub normalization: Normalization,
    pub records: Vec<TripletRecord>,
}

impl Manifest {
    pub fn new(records: Vec<TripletRecord>) -> Self {
        Self { schema_version: SCHEMA_VERSION, normalization: Normalization::default(), records }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion(self.schema_version));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.biome.trim().is_empty() {
                return Err(Error::Manifest(format!("record `{}` has an empty biome", r.id)));
            }
            if !seen.insert((r.dem_path.as_str(), r.image_path.as_str())) {
                return Err(Error::Manifest(format!("duplicate pair ({}, {})", r.dem_path, r.image_path)));
            }
        }
        Ok(())
    }

    /// Indices of the records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| r.split == split).map(|(i, _)| i).collect()
    }

    pub fn split_records(&self, split: Split) -> Vec<&TripletRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.validate()?;
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(path, text).map_err(io_err(path))
}

/// Parses, validates and checks that every referenced file exists
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Manifest("missing schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion(version as u32));
    }
    let m: Manifest = serde_json::from_value(value)?;
    m.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    let missing: Vec<PathBuf> = m
        .records
        .iter()
        .flat_map(|r| [root.join(&r.dem_path), root.join(&r.image_path)])
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(m)
}

/// Largest-remainder allocation of `n` items over `ratios`; leftover units
/// go to the largest fractional parts, ties to the earlier ratio.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Assigns train/val/test within each biome stratum. `required` lists
/// biomes that must be present; a required biome with no records is an
/// error.
pub fn stratified_split(m: &Manifest, ratios: [f64; 3], seed: u64, required: &[&str]) -> Result<Manifest> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        strata.entry(r.biome.as_str()).or_default().push(i);
    }
    if let Some(b) = required.iter().find(|b| !strata.contains_key(*b)) {
        return Err(Error::EmptyStratum(b.to_string()));
    }
    let mut out = m.clone();
    for (biome, mut idx) in strata {
        idx.shuffle(&mut substream(seed, &format!("split/{biome}")));
        let counts = largest_remainder(idx.len(), &ratios);
        let mut it = idx.into_iter();
        for (split, count) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
            for i in it.by_ref().take(count) {
                out.records[i].split = split;
            }
        }
    }
    Ok(out)
}

/// Batches of record indices for one epoch: the split is shuffled with a
/// stream keyed by `(seed, epoch)` and the last batch may be short.
pub fn epoch_batches(m: &Manifest, split: Split, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut idx = m.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    idx.shuffle(&mut substream(seed, &format!("batches/epoch{epoch}")));
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless batch stream over epochs. Only full batches are yielded, so
/// every step sees `batch_size` records.
pub struct BatchStream {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(m: &Manifest, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let pool = m.indices(split);
        if pool.is_empty() {
            return Err(Error::EmptySplit(split.name().into()));
        }
        Self::from_pool(pool, batch_size, seed)
    }

    /// Stream over the indices `0..n`.
    pub fn over(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if n == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        Self::from_pool((0..n).collect(), batch_size, seed)
    }

    fn from_pool(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        let mut s = Self { pool, batch_size, seed, epoch: 0, cursor: 0, order: Vec::new() };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.order.shuffle(&mut substream(self.seed, &format!("batches/epoch{}", self.epoch)));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Advances past `steps` batches.
    pub fn skip_batches(&mut self, steps: u64) {
        let total = steps as usize * self.batch_size;
        let n = self.order.len();
        let target = self.cursor + total;
        self.epoch += (target / n) as u64;
        let rest = target % n;
        if target >= n {
            self.reshuffle();
        }
        self.cursor = rest;
    }
}
