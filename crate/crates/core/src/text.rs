//! Caption embedding providers and conditioning dropout for guidance.

use std::fs;
use std::path::{Path, PathBuf};

use geodiffussr_tensor::{Real, Tensor};
use rand::Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, mix64};

pub const MAX_TOKENS: usize = 64;
pub const DEFAULT_DROPOUT_P: f64 = 0.1;
pub const NULL_PROVIDER: &str = "null";

/// `L × D` token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor<f32>,
    pub provider_id: String,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_null(&self) -> bool {
        self.provider_id == NULL_PROVIDER
    }

    pub fn mean_pooled(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for row in self.tokens.data().chunks_exact(d) {
            for (a, &v) in m.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }
}

/// The "no prompt" sequence: `l` zero tokens of width `d`.
pub fn null_embedding(d: usize, l: usize) -> TextEmbedding {
    TextEmbedding { tokens: Tensor::zeros([l, d]), provider_id: NULL_PROVIDER.into() }
}

/// Replace `emb` with the null sequence with probability `p`.
pub fn cfg_dropout(emb: &TextEmbedding, p: f64, rng: &mut impl Rng) -> TextEmbedding {
    let draw: f64 = rng.random();
    if draw < p {
        null_embedding(emb.dim(), 1)
    } else {
        emb.clone()
    }
}

pub trait TextProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Result<TextEmbedding>;
}

fn tokenize(caption: &str) -> Result<Vec<String>> {
    let mut toks: Vec<String> = caption.split_whitespace().map(|t| t.to_lowercase()).collect();
    if toks.is_empty() {
        return Err(Error::Config("caption must be non-empty".into()));
    }
    if toks.len() > MAX_TOKENS {
        log::warn!("caption has {} tokens; truncating to {MAX_TOKENS}", toks.len());
        toks.truncate(MAX_TOKENS);
    }
    Ok(toks)
}

/// Maps each lowercase whitespace token to a fixed pseudo-random unit-variance
/// vector derived from an FNV-1a hash of the token and the provider seed.
#[derive(Clone, Debug)]
pub struct HashProvider {
    dim: usize,
    seed: u64,
    id: String,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, id: format!("hash-{seed}") }
    }

    fn token_vector(&self, token: &str) -> impl Iterator<Item = f32> + '_ {
        let base = fnv1a64(token.as_bytes()) ^ mix64(self.seed);
        let scale = 3f64.sqrt();
        (0..self.dim).map(move |j| {
            let bits = mix64(base.wrapping_add(j as u64));
            // uniform on [-√3, √3): zero mean, unit variance
            let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
            ((2.0 * u - 1.0) * scale) as f32
        })
    }
}

impl TextProvider for HashProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let toks = tokenize(caption)?;
        let data: Vec<f32> = toks.iter().flat_map(|t| self.token_vector(t)).collect();
        Ok(TextEmbedding { tokens: Tensor::from_vec([toks.len(), self.dim], data)?, provider_id: self.id.clone() })
    }
}

/// Reads precomputed language-model hidden states from a cache directory:
/// `<dir>/<fnv1a64(caption) as 16 hex digits>.gdt`, each a tensor container
/// holding `hidden_state` of shape `[L, D]`.
#[derive(Clone, Debug)]
pub struct CachedProvider {
    dir: PathBuf,
    dim: usize,
    id: String,
}

impl CachedProvider {
    pub fn open(dir: &Path, dim: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::ProviderUnavailable(format!("embedding cache {} not found", dir.display())));
        }
        Ok(Self { dir: dir.to_path_buf(), dim, id: format!("cache:{}", dir.display()) })
    }

    pub fn entry_path(dir: &Path, caption: &str) -> PathBuf {
        dir.join(format!("{:016x}.gdt", fnv1a64(caption.as_bytes())))
    }

    /// Store a hidden-state sequence for `caption`.
    pub fn write_entry(dir: &Path, caption: &str, hidden: &Tensor<f32>) -> Result<()> {
        fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        let mut c = Container::new(serde_json::json!({"kind": "text-embedding", "caption": caption}));
        c.push("hidden_state", hidden);
        c.save(&Self::entry_path(dir, caption))
    }
}

impl TextProvider for CachedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        if caption.trim().is_empty() {
            return Err(Error::Config("caption must be non-empty".into()));
        }
        let path = Self::entry_path(&self.dir, caption);
        if !path.exists() {
            return Err(Error::ProviderUnavailable(format!("no cached embedding for {caption:?}")));
        }
        let mut t = Container::load(&path)?.get::<f32>("hidden_state")?;
        match *t.shape() {
            [l, d] if d == self.dim && l > 0 => {
                if l > MAX_TOKENS {
                    log::warn!("cached embedding has {l} tokens; truncating to {MAX_TOKENS}");
                    t = Tensor::from_vec([MAX_TOKENS, d], t.data()[..MAX_TOKENS * d].to_vec())?;
                }
            }
            _ => {
                return Err(Error::Shape(format!("cached embedding {:?}, expected [L, {}]", t.shape(), self.dim)));
            }
        }
        Ok(TextEmbedding { tokens: t, provider_id: self.id.clone() })
    }
}

/// Provider from a config key: `hash` or `cache:<dir>`.
pub fn provider_from_key(key: &str, dim: usize, seed: u64) -> Result<Box<dyn TextProvider>> {
    if key == "hash" {
        return Ok(Box::new(HashProvider::new(dim, seed)));
    }
    if let Some(dir) = key.strip_prefix("cache:") {
        return Ok(Box::new(CachedProvider::open(Path::new(dir), dim)?));
    }
    Err(Error::Unknown { kind: "text provider", name: key.into() })
}

/// Padded batch `[n, L_max, D]` plus the valid length of each sequence.
#[derive(Clone, Debug)]
pub struct TextBatch<T> {
    pub tokens: Tensor<T>,
    pub lens: Vec<usize>,
}

impl<T: Real> TextBatch<T> {
    pub fn from_embeddings(embs: &[&TextEmbedding]) -> Result<Self> {
        let first = embs.first().ok_or_else(|| Error::Shape("empty text batch".into()))?;
        let d = first.dim();
        let lmax = embs.iter().map(|e| e.len()).max().unwrap_or(1).max(1);
        let mut data = vec![T::zero(); embs.len() * lmax * d];
        let mut lens = Vec::with_capacity(embs.len());
        for (i, e) in embs.iter().enumerate() {
            if e.dim() != d {
                return Err(Error::Shape(format!("text dims {} vs {d} within one batch", e.dim())));
            }
            for (o, &v) in data[i * lmax * d..].iter_mut().zip(e.tokens.data()) {
                *o = T::lit(v as f64);
            }
            lens.push(e.len());
        }
        Ok(Self { tokens: Tensor::from_vec([embs.len(), lmax, d], data)?, lens })
    }

    /// `n` copies of the null sequence.
    pub fn null(n: usize, d: usize) -> Self {
        Self { tokens: Tensor::zeros([n, 1, d]), lens: vec![1; n] }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn hash_embedding_is_deterministic_and_case_insensitive() {
        let p = HashProvider::new(32, 1);
        let a = p.embed("Snow-capped peaks").unwrap();
        assert_eq!(a, p.embed("Snow-capped peaks").unwrap());
        assert_eq!(a.tokens, p.embed("snow-capped   PEAKS").unwrap().tokens);
        assert_eq!(a.tokens.shape(), &[2, 32]);
    }

    #[test]
    fn different_captions_are_dissimilar() {
        let p = HashProvider::new(32, 0);
        let a = p.embed("snowy mountains").unwrap().mean_pooled();
        let b = p.embed("sandy desert").unwrap().mean_pooled();
        let c = cosine(&a, &b);
        assert!(c < 0.5, "cosine {c}");
    }

    #[test]
    fn hash_values_are_platform_fixed() {
        // Pure integer hashing: these bits are identical on every platform.
        let p = HashProvider::new(4, 0);
        let e = p.embed("ridge").unwrap();
        let again: Vec<f32> = p.token_vector("ridge").collect();
        assert_eq!(e.tokens.data(), again.as_slice());
        assert!(e.tokens.data().iter().all(|v| v.abs() <= 3f32.sqrt()));
    }

    #[test]
    fn empty_caption_is_an_error() {
        let p = HashProvider::new(8, 0);
        assert!(p.embed("").is_err());
        assert!(p.embed("   ").is_err());
    }

    #[test]
    fn long_captions_are_truncated() {
        let p = HashProvider::new(8, 0);
        let long = vec!["word"; 100].join(" ");
        assert_eq!(p.embed(&long).unwrap().len(), MAX_TOKENS);
    }

    #[test]
    fn null_embedding_shape_and_stability() {
        let n = null_embedding(8, 4);
        assert_eq!(n.tokens.shape(), &[4, 8]);
        assert_eq!(n, null_embedding(8, 4));
        assert!(n.is_null());
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let e = HashProvider::new(8, 0).embed("coastal cliffs").unwrap();
        let mut rng = substream(5, "dropout");
        for _ in 0..100 {
            assert_eq!(cfg_dropout(&e, 0.0, &mut rng), e);
            assert!(cfg_dropout(&e, 1.0, &mut rng).is_null());
        }
        let mut rng = substream(6, "dropout");
        let nulls = (0..10_000).filter(|_| cfg_dropout(&e, 0.1, &mut rng).is_null()).count();
        let frac = nulls as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "null fraction {frac}");
    }

    #[test]
    fn cached_provider_round_trip_and_fallback_message() {
        let dir = tempfile::tempdir().unwrap();
        let hidden = Tensor::from_vec([3, 4], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        CachedProvider::write_entry(dir.path(), "green valley", &hidden).unwrap();
        let p = CachedProvider::open(dir.path(), 4).unwrap();
        assert_eq!(p.embed("green valley").unwrap().tokens, hidden);
        let err = p.embed("unseen caption").unwrap_err().to_string();
        assert!(err.contains("hash"), "{err}");
        assert!(CachedProvider::open(&dir.path().join("nope"), 4).is_err());
    }

    #[test]
    fn batch_padding_records_lengths() {
        let p = HashProvider::new(4, 0);
        let a = p.embed("a b c").unwrap();
        let b = p.embed("d").unwrap();
        let tb = TextBatch::<f32>::from_embeddings(&[&a, &b]).unwrap();
        assert_eq!(tb.tokens.shape(), &[2, 3, 4]);
        assert_eq!(tb.lens, vec![3, 1]);
        assert!(tb.tokens.data()[16..].iter().all(|&v| v == 0.0));
    }
}
