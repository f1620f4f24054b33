//! Single-image collections and depth providers.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbdImage;

/// Lowest normalized disparity; the far end of every image maps here.
pub const MIN_NORMALIZED_DISPARITY: f64 = 0.01;

/// Where per-pixel disparity for a photo comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum DepthProvider {
    /// Exact disparity from the procedural renderer; only valid for
    /// generated scenes, which carry their own disparity.
    Synthetic,
    /// One disparity for the whole image.
    ConstantPlane { disparity: f64 },
    /// A sibling `<stem>.disp.png` 16-bit grayscale file per image; larger
    /// values are nearer.
    ExternalFile,
}

impl DepthProvider {
    pub fn parse(tag: &str, constant: f64) -> Result<Self> {
        match tag {
            "synthetic" => Ok(Self::Synthetic),
            "constant-plane" => Ok(Self::ConstantPlane { disparity: constant }),
            "external-file" => Ok(Self::ExternalFile),
            other => Err(Error::Config(format!(
                "unknown depth provider `{other}` (expected synthetic, constant-plane or external-file)"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::ConstantPlane { .. } => "constant-plane",
            Self::ExternalFile => "external-file",
        }
    }
}

/// Per-image affine map of raw disparity onto `[MIN_NORMALIZED_DISPARITY, 1]`.
/// A constant map is kept as is, clamped into that range.
pub fn normalize_disparity(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        let v = if lo.is_finite() { lo.clamp(MIN_NORMALIZED_DISPARITY, 1.0) } else { 1.0 };
        return vec![v; raw.len()];
    }
    raw.iter()
        .map(|d| MIN_NORMALIZED_DISPARITY + (1.0 - MIN_NORMALIZED_DISPARITY) * (d - lo) / (hi - lo))
        .collect()
}

fn center_crop_resize(img: &DynamicImage, size: usize) -> DynamicImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    if side as usize == size {
        cropped
    } else {
        cropped.resize_exact(size as u32, size as u32, FilterType::Triangle)
    }
}

fn disparity_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.disp.png"))
}

fn is_image_file(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    if name.ends_with(".disp.png") {
        return false;
    }
    [".png", ".jpg", ".jpeg"].iter().any(|e| name.ends_with(e))
}

/// Decode in-memory image bytes. Disparity comes from optional 16-bit
/// grayscale bytes, otherwise a constant plane at `fallback_disparity`.
pub fn decode_image(bytes: &[u8], disparity: Option<&[u8]>, size: usize, fallback_disparity: f64) -> Result<RgbdImage> {
    let img = image::load_from_memory(bytes)?;
    let rgb = center_crop_resize(&img, size).to_rgb8();
    let planes = RgbdImage::rgb_planes(&rgb);
    let raw = match disparity {
        Some(d) => {
            let d = image::load_from_memory(d)?;
            let d: ImageBuffer<Luma<u16>, Vec<u16>> = center_crop_resize(&d, size).to_luma16();
            d.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
        }
        None => {
            if !(fallback_disparity > 0.0) {
                return Err(Error::NonPositiveDisparity(fallback_disparity));
            }
            vec![fallback_disparity; size * size]
        }
    };
    RgbdImage::from_rgb_disparity(size, size, planes, normalize_disparity(&raw))
}

/// Decode one photo and attach disparity.
pub fn load_image(path: &Path, size: usize, provider: &DepthProvider) -> Result<RgbdImage> {
    let img = image::open(path)?;
    let rgb = center_crop_resize(&img, size).to_rgb8();
    let planes = RgbdImage::rgb_planes(&rgb);
    let raw = match provider {
        DepthProvider::Synthetic => {
            return Err(Error::Config(
                "the synthetic depth provider only applies to generated scenes".into(),
            ))
        }
        DepthProvider::ConstantPlane { disparity } => {
            if !(*disparity > 0.0) {
                return Err(Error::NonPositiveDisparity(*disparity));
            }
            vec![*disparity; size * size]
        }
        DepthProvider::ExternalFile => {
            let disp_path = disparity_sibling(path);
            let d = image::open(&disp_path)?;
            let d: ImageBuffer<Luma<u16>, Vec<u16>> = center_crop_resize(&d, size).to_luma16();
            d.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
        }
    };
    RgbdImage::from_rgb_disparity(size, size, planes, normalize_disparity(&raw))
}

#[derive(Debug)]
pub struct Collection {
    pub items: Vec<RgbdImage>,
    pub sources: Vec<PathBuf>,
    /// One entry per skipped file.
    pub warnings: Vec<String>,
}

/// Load every PNG/JPEG under `dir` (non-recursive), skipping unreadable files,
/// in an order shuffled deterministically by `seed`.
pub fn load_collection(dir: &Path, size: usize, provider: &DepthProvider, seed: u64) -> Result<Collection> {
    if !dir.is_dir() {
        return Err(Error::MissingDataset(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut items = Vec::new();
    let mut sources = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        match load_image(&p, size, provider) {
            Ok(img) => {
                items.push(img);
                sources.push(p);
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                let msg = format!("skipping {}: {e}", p.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(Collection { items, sources, warnings })
}

/// Write a disparity grid as a 16-bit sibling file readable by the
/// external-file provider.
pub fn save_disparity_png(path: &Path, width: usize, height: usize, disparity: &[f64]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let d = disparity[y as usize * width + x as usize].clamp(0.0, 1.0);
        Luma([(d * 65535.0).round() as u16])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_range() {
        let n = normalize_disparity(&[0.2, 0.4, 1.8]);
        assert!((n[0] - MIN_NORMALIZED_DISPARITY).abs() < 1e-12);
        assert!((n[2] - 1.0).abs() < 1e-12);
        assert_eq!(normalize_disparity(&[0.3; 4]), vec![0.3; 4]);
        assert_eq!(normalize_disparity(&[5.0; 2]), vec![1.0; 2]);
    }

    #[test]
    fn folder_contract() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            let img = RgbdImage::from_fn(20, 10, |x, y| ([x as f64 / 19.0, y as f64 / 9.0, i as f64 / 3.0], 0.5));
            img.save_png(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let provider = DepthProvider::ConstantPlane { disparity: 0.5 };
        let c = load_collection(dir.path(), 8, &provider, 1).unwrap();
        assert_eq!(c.items.len(), 3);
        assert_eq!(c.warnings.len(), 1);
        assert!(c.items.iter().all(|i| i.width == 8 && i.height == 8));
        let again = load_collection(dir.path(), 8, &provider, 1).unwrap();
        assert_eq!(c.sources, again.sources);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_collection(empty.path(), 8, &provider, 1), Err(Error::EmptyDataset(_))));
        assert!(matches!(
            load_collection(&empty.path().join("nope"), 8, &provider, 1),
            Err(Error::MissingDataset(_))
        ));
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let dir = tempfile::tempdir().unwrap();
        // 200x100, left and right quarters red, middle green
        let img = RgbdImage::from_fn(200, 100, |x, _| {
            if (50..150).contains(&x) {
                ([0.0, 1.0, 0.0], 0.5)
            } else {
                ([1.0, 0.0, 0.0], 0.5)
            }
        });
        let p = dir.path().join("wide.png");
        img.save_png(&p).unwrap();
        let out = load_image(&p, 10, &DepthProvider::ConstantPlane { disparity: 0.5 }).unwrap();
        assert!(out.rgb[..100].iter().all(|&r| r < 0.01), "no red survives the crop");
    }

    #[test]
    fn external_disparity_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbdImage::from_fn(6, 6, |_, _| ([0.5; 3], 0.5));
        img.save_png(dir.path().join("a.png")).unwrap();
        let raw: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
        save_disparity_png(&dir.path().join("a.disp.png"), 6, 6, &raw).unwrap();
        let c = load_collection(dir.path(), 6, &DepthProvider::ExternalFile, 0).unwrap();
        assert_eq!(c.items.len(), 1, "the disparity sibling is not an item");
        let d = &c.items[0].disparity;
        assert!((d[0] - MIN_NORMALIZED_DISPARITY).abs() < 1e-9 && (d[35] - 1.0).abs() < 1e-9);
    }
}
