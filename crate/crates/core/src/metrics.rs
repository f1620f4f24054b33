//! Evaluation metrics for short-range synthesis and long-range generation.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nz_autograd::{blur_down2_forward, conv2d_forward, Array, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::image::RgbdImage;
use crate::losses::FeatureExtractor;
use crate::params::Params;

pub const PSNR_CAP: f64 = 99.0;
pub const FID_EPS: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_EMBED_DIM: usize = 256;

fn ensure_same(a: &RgbdImage, b: &RgbdImage) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err(format!("{}x{}", a.width, a.height), format!("{}x{}", b.width, b.height)))
    }
}

/// Colour PSNR in dB for values in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbdImage, b: &RgbdImage) -> Result<f64> {
    ensure_same(a, b)?;
    let mse = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.rgb.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM over colour channels with an 11-tap Gaussian window (σ = 1.5),
/// renormalized at the borders.
pub fn ssim(a: &RgbdImage, b: &RgbdImage) -> Result<f64> {
    ensure_same(a, b)?;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h) = (a.width, a.height);
    let taps: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let blur = |p: &[f64]| -> Vec<f64> {
        let pass = |src: &[f64], dx: isize, dy: isize| {
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for (t, wt) in taps.iter().enumerate() {
                        let o = t as isize - 5;
                        let (xx, yy) = (x as isize + o * dx, y as isize + o * dy);
                        if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                            acc += wt * src[yy as usize * w + xx as usize];
                            norm += wt;
                        }
                    }
                    out[y * w + x] = acc / norm;
                }
            }
            out
        };
        pass(&pass(p, 1, 0), 0, 1)
    };
    let n = w * h;
    let mut total = 0.0;
    for c in 0..3 {
        let x = &a.rgb[c * n..(c + 1) * n];
        let y = &b.rgb[c * n..(c + 1) * n];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my, sxx, syy, sxy) = (blur(x), blur(y), blur(&xx), blur(&yy), blur(&xy));
        let mut acc = 0.0;
        for i in 0..n {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + C1) * (2.0 * cov + C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// `Σ_l mean|φ^l(a) − φ^l(b)|` over colour.
pub fn perceptual(a: &RgbdImage, b: &RgbdImage, features: &dyn FeatureExtractor) -> Result<f64> {
    ensure_same(a, b)?;
    let fa = features.features(&Var::constant(a.rgb_array()));
    let fb = features.features(&Var::constant(b.rgb_array()));
    Ok(fa.iter().zip(&fb).map(|(p, q)| p.sub(q).abs().mean().item()).sum())
}

// ---- embeddings ---------------------------------------------------------

/// Maps an image to a fixed-length feature vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, img: &RgbdImage) -> Result<Vec<f64>>;

    fn embed_all(&self, imgs: &[RgbdImage]) -> Result<Vec<Vec<f64>>> {
        imgs.iter().map(|i| self.embed(i)).collect()
    }
}

/// Fixed, seed-deterministic random convolutional pyramid with global mean
/// and standard-deviation pooling.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    weights: Params,
    dim: usize,
}

impl RandomConvEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 || !dim.is_multiple_of(8) {
            return Err(Error::Config(format!("embedding dim {dim} must be a positive multiple of 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Params::new();
        let (c1, c2, c3) = (dim / 8, dim / 4, dim / 2);
        for (name, cin, cout) in [("e0", 3, c1), ("e1", c1, c2), ("e2", c2, c3)] {
            weights.init_normal(name, &[cout, cin, 3, 3], &mut rng);
            let g = 1.0 / ((cin * 9) as f64).sqrt();
            weights.get_mut(name).unwrap().scale_in_place(g);
        }
        Ok(Self { weights, dim })
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM, 0).expect("default dim is valid")
    }
}

impl Embedder for RandomConvEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &RgbdImage) -> Result<Vec<f64>> {
        let lrelu = |a: Array| a.map(|v| if v > 0.0 { v } else { 0.2 * v });
        let mut x = img.rgb_array().map(|v| 2.0 * v - 1.0);
        for (i, name) in ["e0", "e1", "e2"].iter().enumerate() {
            x = lrelu(conv2d_forward(&x, self.weights.get(name).unwrap(), 1, 1));
            if i < 2 {
                x = blur_down2_forward(&x);
            }
        }
        let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        let d = x.data();
        let mut out = Vec::with_capacity(2 * c);
        let mut stds = Vec::with_capacity(c);
        for ch in 0..c {
            let s = &d[ch * hw..(ch + 1) * hw];
            let m = s.iter().sum::<f64>() / hw as f64;
            let v = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / hw as f64;
            out.push(m);
            stds.push(v.sqrt());
        }
        out.extend(stds);
        Ok(out)
    }
}

/// Content key of an image for external embedding lookup: hex SHA-256 of its
/// 8-bit PNG encoding as written by this tool.
pub fn image_key(img: &RgbdImage) -> Result<String> {
    Ok(hex::encode(Sha256::digest(img.png_bytes()?)))
}

/// Embeddings computed offline, read from a header-less CSV whose rows are
/// `key,v1,…,vd` with keys from [`image_key`].
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl ExternalEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
            let key = rec.get(0).unwrap_or_default().to_string();
            let v: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Metric(format!("{} row {}: {e}", path.display(), line + 1)))?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(Error::Metric(format!("{} row {}: inconsistent dimension", path.display(), line + 1)));
            }
            table.insert(key, v);
        }
        let dim = dim.ok_or_else(|| Error::Metric(format!("{}: no embeddings", path.display())))?;
        Ok(Self { table, dim })
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &RgbdImage) -> Result<Vec<f64>> {
        let key = image_key(img)?;
        self.table
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Metric(format!("no external embedding for image {key}")))
    }
}

/// Serializable choice of embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum EmbedderHandle {
    FixedRandomConv { dim: usize, seed: u64 },
    External { path: std::path::PathBuf },
}

impl Default for EmbedderHandle {
    fn default() -> Self {
        Self::FixedRandomConv {
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl EmbedderHandle {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            Self::FixedRandomConv { dim, seed } => Box::new(RandomConvEmbedder::new(*dim, *seed)?),
            Self::External { path } => Box::new(ExternalEmbedder::load(path)?),
        })
    }
}

// ---- distribution distances ---------------------------------------------

fn to_matrix(set: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = set.first().map(Vec::len).unwrap_or(0);
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Metric("embeddings must be non-empty and share one dimension".into()));
    }
    Ok(DMatrix::from_fn(set.len(), d, |i, j| set[i][j]))
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 items per set, got {}", set.len())));
    }
    let x = to_matrix(set)?;
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid_from_embeddings(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (mr, cr) = gaussian_fit(real)?;
    let (mf, cf) = gaussian_fit(fake)?;
    if mr.len() != mf.len() {
        return Err(Error::Metric("embedding dimensions differ".into()));
    }
    let eye = DMatrix::<f64>::identity(mr.len(), mr.len()) * FID_EPS;
    let (cr, cf) = (cr + &eye, cf + &eye);
    // tr((Σr Σf)^½) = tr((Σr^½ Σf Σr^½)^½), the inner product being symmetric
    let sr = sym_sqrt(&cr);
    let inner = &sr * &cf * &sr;
    let eig = ((&inner + inner.transpose()) * 0.5).symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mr - mf).norm_squared() + cr.trace() + cf.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

pub fn fid(real: &[RgbdImage], fake: &[RgbdImage], e: &dyn Embedder) -> Result<f64> {
    fid_from_embeddings(&e.embed_all(real)?, &e.embed_all(fake)?)
}

/// FID of frames `[t, t + window)` pooled across sequences, per window start.
pub fn fid_sliding_from_embeddings(real: &[Vec<f64>], sequences: &[Vec<Vec<f64>>], window: usize) -> Result<Vec<f64>> {
    let len = sequences.iter().map(Vec::len).min().unwrap_or(0);
    if window == 0 || len < window {
        return Err(Error::SequenceTooShort { len, window });
    }
    (0..=len - window)
        .map(|t| {
            let pooled: Vec<Vec<f64>> = sequences.iter().flat_map(|s| s[t..t + window].iter().cloned()).collect();
            fid_from_embeddings(real, &pooled)
        })
        .collect()
}

pub fn fid_sliding(real: &[RgbdImage], sequences: &[Vec<RgbdImage>], window: usize, e: &dyn Embedder) -> Result<Vec<f64>> {
    let seqs = sequences.iter().map(|s| e.embed_all(s)).collect::<Result<Vec<_>>>()?;
    fid_sliding_from_embeddings(&e.embed_all(real)?, &seqs, window)
}

/// Unbiased MMD² with kernel `(xᵀy/d + 1)³`. Equal-size sets use the paired
/// U-statistic (exactly 0 for identical sets); otherwise the two-sample form.
pub fn kid_from_embeddings(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Metric("need at least 2 items per set".into()));
    }
    let (x, y) = (to_matrix(real)?, to_matrix(fake)?);
    if x.ncols() != y.ncols() {
        return Err(Error::Metric("embedding dimensions differ".into()));
    }
    let d = x.ncols() as f64;
    let kernel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * b.transpose()).map(|v| (v / d + 1.0).powi(3));
    let (kxx, kyy, kxy) = (kernel(&x, &x), kernel(&y, &y), kernel(&x, &y));
    let (m, n) = (x.nrows(), y.nrows());
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    if m == n {
        let mm = (m * (m - 1)) as f64;
        Ok((off(&kxx) + off(&kyy) - off(&kxy) - off(&kxy.transpose())) / mm)
    } else {
        Ok(off(&kxx) / (m * (m - 1)) as f64 + off(&kyy) / (n * (n - 1)) as f64 - 2.0 * kxy.sum() / (m * n) as f64)
    }
}

pub fn kid(real: &[RgbdImage], fake: &[RgbdImage], e: &dyn Embedder) -> Result<f64> {
    kid_from_embeddings(&e.embed_all(real)?, &e.embed_all(fake)?)
}

/// Gram matrices `F Fᵀ / (H W)` of each feature level.
fn grams(img: &RgbdImage, features: &dyn FeatureExtractor) -> Vec<DMatrix<f64>> {
    features
        .features(&Var::constant(img.rgb_array()))
        .iter()
        .map(|f| {
            let s = f.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let m = DMatrix::from_row_slice(c, hw, &f.value().data()[..c * hw]);
            &m * m.transpose() / hw as f64
        })
        .collect()
}

/// Mean over frames of `Σ_l ‖G^l(frame) − G^l(start)‖²_F`.
pub fn style_consistency(start: &RgbdImage, sequence: &[RgbdImage], features: &dyn FeatureExtractor) -> Result<f64> {
    if sequence.is_empty() {
        return Err(Error::Metric("style consistency needs a non-empty sequence".into()));
    }
    let g0 = grams(start, features);
    let mut total = 0.0;
    for frame in sequence {
        ensure_same(start, frame)?;
        total += grams(frame, features)
            .iter()
            .zip(&g0)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>();
    }
    Ok(total / sequence.len() as f64)
}

/// Evaluation report written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub fid: f64,
    pub fid_sw: Vec<f64>,
    pub kid: f64,
    pub style: f64,
    pub config: serde_json::Value,
}

impl EvaluationReport {
    pub const FIELDS: [&'static str; 7] = ["psnr", "ssim", "perceptual", "fid", "fid_sw", "kid", "style"];
}
