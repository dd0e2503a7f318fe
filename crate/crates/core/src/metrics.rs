//! Evaluation metrics: MSE, distance correlation between texture colour and
//! elevation, Fréchet distance over feature embeddings, and a perceptual
//! distance plug-in point.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::DemEncoder;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tile::{TerrainTile, TextureTile};

pub const DCOR_GT: f64 = 0.3816;
pub const DCOR_PIXEL_CAP: usize = 1024;

/// RGB in `[0, 1]` to HSV with hue scaled to `[0, 1)`.
pub fn rgb_to_hsv_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|v| v.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb_pixel(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map_pixels(tile: &TextureTile, f: impl Fn([f64; 3]) -> [f64; 3]) -> TextureTile {
    let mut out = Vec::with_capacity(tile.data().len());
    let mut clamped = false;
    for px in tile.data().chunks_exact(3) {
        let p = [px[0], px[1], px[2]].map(f64::from);
        clamped |= p.iter().any(|v| !(0.0..=1.0).contains(v));
        out.extend(f(p).map(|v| v as f32));
    }
    if clamped {
        log::warn!("texture values outside [0, 1] clamped before colour conversion");
    }
    TextureTile::from_clamped(tile.height(), tile.width(), out).expect("same shape")
}

pub fn rgb_to_hsv(tile: &TextureTile) -> TextureTile {
    map_pixels(tile, rgb_to_hsv_pixel)
}

pub fn hsv_to_rgb(tile: &TextureTile) -> TextureTile {
    map_pixels(tile, hsv_to_rgb_pixel)
}

fn dist(x: &[f64], p: usize, i: usize, j: usize) -> f64 {
    x[i * p..(i + 1) * p].iter().zip(&x[j * p..(j + 1) * p]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn is_constant(x: &[f64], p: usize) -> bool {
    x.chunks_exact(p).all(|r| r == &x[..p])
}

/// Sample distance correlation (V-statistic) between `X` (`n×p`, row-major)
/// and `Y` (`n×q`).
///
/// Uses `Σ A∘B = Σ a∘b − 2n Σ ā_i b̄_i + n² ā b̄` for the double-centered
/// product, so memory stays O(n).
pub fn distance_correlation(x: &[f64], p: usize, y: &[f64], q: usize) -> Result<f64> {
    if p == 0 || q == 0 || x.len() % p != 0 || y.len() % q != 0 || x.len() / p != y.len() / q {
        return Err(Error::Shape(format!("dCor: X has {} values of dim {p}, Y has {} of dim {q}", x.len(), y.len())));
    }
    let n = x.len() / p;
    if n < 2 {
        return Err(Error::Degenerate("degenerate sample: dCor needs n ≥ 2".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "dCor samples".into(), step: 0 });
    }
    if is_constant(x, p) || is_constant(y, q) {
        return Err(Error::Degenerate("degenerate sample: constant X or Y".into()));
    }
    let mut ra = vec![0.0; n];
    let mut rb = vec![0.0; n];
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let a = dist(x, p, i, j);
            let b = dist(y, q, i, j);
            ra[i] += a;
            rb[i] += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
    }
    let nf = n as f64;
    ra.iter_mut().chain(rb.iter_mut()).for_each(|v| *v /= nf);
    let ga = ra.iter().sum::<f64>() / nf;
    let gb = rb.iter().sum::<f64>() / nf;
    let centered = |s: f64, u: &[f64], v: &[f64], gu: f64, gv: f64| {
        let cross: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        (s - 2.0 * nf * cross + nf * nf * gu * gv) / (nf * nf)
    };
    let dcov2 = centered(sab, &ra, &rb, ga, gb).max(0.0);
    let dvar_x = centered(saa, &ra, &ra, ga, ga);
    let dvar_y = centered(sbb, &rb, &rb, gb, gb);
    if dvar_x <= 0.0 || dvar_y <= 0.0 {
        return Err(Error::Degenerate("degenerate sample: zero distance variance".into()));
    }
    Ok((dcov2 / (dvar_x * dvar_y).sqrt()).sqrt().min(1.0))
}

/// dCor between HSV pixels of `texture` and elevations of `dem`, over at
/// most `cap` pixels chosen with `seed`.
pub fn dcor_image_pair(texture: &TextureTile, dem: &TerrainTile, cap: usize, seed: u64) -> Result<f64> {
    if !texture.same_grid(dem) {
        return Err(Error::Shape(format!(
            "texture {}×{} vs DEM {}×{}",
            texture.height(),
            texture.width(),
            dem.height(),
            dem.width()
        )));
    }
    let n = dem.data().len();
    let idx: Vec<usize> = if n > cap {
        let mut v = sample(&mut substream(seed, "metrics/dcor-subsample"), n, cap).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let rgb = texture.data();
    let mut x = Vec::with_capacity(idx.len() * 3);
    let mut y = Vec::with_capacity(idx.len());
    for &i in &idx {
        x.extend(rgb_to_hsv_pixel([rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]].map(f64::from)));
        y.push(dem.data()[i] as f64);
    }
    distance_correlation(&x, 3, &y, 1)
}

/// Mean per-pair dCor and the number of pairs that were skipped as
/// degenerate.
pub fn mean_dcor(pairs: &[(&TextureTile, &TerrainTile)], seed: u64) -> Result<(f64, usize)> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no texture/DEM pairs".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (k, (tex, dem)) in pairs.iter().enumerate() {
        match dcor_image_pair(tex, dem, DCOR_PIXEL_CAP, seed ^ k as u64) {
            Ok(d) => {
                sum += d;
                used += 1;
            }
            Err(Error::Degenerate(m)) => log::warn!("pair {k} skipped: {m}"),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every pair was degenerate".into()));
    }
    Ok((sum / used as f64, pairs.len() - used))
}

/// `|mean dCor − dcor_gt|`.
pub fn delta_dcor(pairs: &[(&TextureTile, &TerrainTile)], dcor_gt: f64, seed: u64) -> Result<f64> {
    Ok(delta_from_mean(mean_dcor(pairs, seed)?.0, dcor_gt))
}

pub fn delta_from_mean(mean: f64, dcor_gt: f64) -> f64 {
    (mean - dcor_gt).abs()
}

pub fn mse(a: &TextureTile, b: &TextureTile) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!("mse: {}×{} vs {}×{}", a.height(), a.width(), b.height(), b.width())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

fn mean_cov(f: &[f64], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if d == 0 || f.len() % d != 0 || f.len() / d < 2 {
        return Err(Error::Shape(format!("need at least 2 feature rows of dim {d}, got {} values", f.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "features".into(), step: 0 });
    }
    let n = f.len() / d;
    let m = DMatrix::from_row_slice(n, d, f);
    let mu = m.row_mean().transpose();
    let mut c = m;
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = (c.transpose() * &c) / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let worst = eig.eigenvalues.iter().cloned().fold(0.0, f64::min);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), worst)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})` between
/// Gaussian fits of two row-major feature sets of width `d`.
pub fn frechet_distance(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a, d)?;
    let (mu_b, cov_b) = mean_cov(b, d)?;
    let (sa, _) = psd_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let (root, worst) = psd_sqrt(&inner);
    if worst < -1e-8 {
        log::warn!("covariance product has eigenvalue {worst:.3e}; clipped to 0");
    }
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * root.trace();
    Ok(v.max(0.0))
}

/// Embeds textures for the Fréchet distance.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Row-major `[n, dim]`.
    fn features(&self, textures: &[&TextureTile]) -> Result<Vec<f64>>;
}

/// Spatially pooled deepest-level activations of the frozen DEM-encoder
/// trunk applied to RGB. Scores from it are reported as `fid(desk)`.
pub struct DeskFeatures {
    encoder: DemEncoder,
}

impl DeskFeatures {
    pub fn new(encoder: DemEncoder) -> Self {
        Self { encoder }
    }
}

impl FeatureExtractor for DeskFeatures {
    fn id(&self) -> &str {
        "desk"
    }

    fn dim(&self) -> usize {
        self.encoder.channels()[2]
    }

    fn features(&self, textures: &[&TextureTile]) -> Result<Vec<f64>> {
        let c = self.dim();
        let mut out = Vec::with_capacity(textures.len() * c);
        for p in self.encoder.encode_rgb_batch(textures)? {
            let lvl = &p.levels[2];
            let hw = lvl.numel() / c;
            let mut acc = vec![0.0f64; c];
            for px in lvl.data().chunks_exact(c) {
                acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v as f64);
            }
            out.extend(acc.into_iter().map(|v| v / hw as f64));
        }
        Ok(out)
    }
}

/// Learned perceptual distance between two textures.
pub trait PerceptualModel {
    fn id(&self) -> &str;
    fn distance(&self, a: &TextureTile, b: &TextureTile) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub dcor_gt: f64,
    /// `desk` or `none`.
    pub feature_extractor: String,
    /// `none`, or the id of a registered perceptual plug-in.
    pub perceptual_model: String,
    pub subsample_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { dcor_gt: DCOR_GT, feature_extractor: "desk".into(), perceptual_model: "none".into(), subsample_seed: 0 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dcor_gt > 0.0 && self.dcor_gt < 1.0) {
            return Err(Error::Config(format!("metrics.dcor_gt must lie in (0, 1), got {}", self.dcor_gt)));
        }
        if !matches!(self.feature_extractor.as_str(), "desk" | "none") {
            return Err(Error::Unknown { kind: "feature extractor", name: self.feature_extractor.clone() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub dcor: f64,
    pub delta_dcor: f64,
    /// Fréchet distance over the configured feature extractor.
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub n_tiles: usize,
    /// Tiles whose dCor was degenerate and left out of the mean.
    pub skipped: usize,
}

/// Full report for generated textures against references on the same DEMs.
pub fn compute_report(
    generated: &[TextureTile],
    reference: &[TextureTile],
    dems: &[TerrainTile],
    cfg: &MetricsConfig,
    features: Option<&dyn FeatureExtractor>,
    perceptual: Option<&dyn PerceptualModel>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let n = generated.len();
    if n == 0 || reference.len() != n || dems.len() != n {
        return Err(Error::Shape(format!(
            "report needs equal non-empty sets, got {n} generated, {} reference, {} DEMs",
            reference.len(),
            dems.len()
        )));
    }
    let mut sq = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        sq += mse(g, r)?;
    }
    let pairs: Vec<_> = generated.iter().zip(dems).collect();
    let (dcor, skipped) = mean_dcor(&pairs, cfg.subsample_seed)?;
    let fid = match features {
        Some(f) if cfg.feature_extractor != "none" => {
            let gr: Vec<_> = generated.iter().collect();
            let rr: Vec<_> = reference.iter().collect();
            Some(frechet_distance(&f.features(&gr)?, &f.features(&rr)?, f.dim())?)
        }
        _ => None,
    };
    let lpips = match perceptual {
        Some(p) if cfg.perceptual_model != "none" => {
            let mut s = 0.0;
            for (g, r) in generated.iter().zip(reference) {
                s += p.distance(g, r)?;
            }
            Some(s / n as f64)
        }
        _ => None,
    };
    Ok(MetricsReport { mse: sq / n as f64, dcor, delta_dcor: delta_from_mean(dcor, cfg.dcor_gt), fid, lpips, n_tiles: n, skipped })
}
