//! Soft sky masks and test-time sky correction against a persistent canvas.
//!
//! The canvas is a plane-at-infinity buffer anchored to the starting view
//! with a wider field of view. Each generated frame takes its sky from the
//! canvas through the rotation-only homography; sky that the canvas has not
//! seen yet is taken from the frame and written back, so the same region is
//! never synthesized twice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Mat3, Vec3};
use crate::image::{Grid, RgbdImage};
use crate::renderer::sample_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyMaskConfig {
    pub disparity_knee: f64,
    pub softness: f64,
    /// Logit bonus at the top row, falling linearly to the negative value at
    /// the bottom row.
    pub row_prior_weight: f64,
}

impl Default for SkyMaskConfig {
    fn default() -> Self {
        Self {
            disparity_knee: 0.02,
            softness: 0.003,
            row_prior_weight: 1.0,
        }
    }
}

impl SkyMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.disparity_knee > 0.0 && self.disparity_knee < 1.0) {
            return Err(Error::Config("sky disparity_knee must lie in (0, 1)".into()));
        }
        if !(self.softness > 0.0 && self.softness.is_finite()) {
            return Err(Error::Config("sky softness must be > 0".into()));
        }
        if !(self.row_prior_weight >= 0.0 && self.row_prior_weight.is_finite()) {
            return Err(Error::Config("sky row_prior_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Anything that can label sky pixels with a soft probability.
pub trait SkySegmenter: Send + Sync {
    fn sky_mask(&self, img: &RgbdImage) -> Grid;
}

/// Disparity threshold plus a top-of-frame prior.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeuristicSky(pub SkyMaskConfig);

impl SkySegmenter for HeuristicSky {
    fn sky_mask(&self, img: &RgbdImage) -> Grid {
        sky_mask(img, &self.0)
    }
}

/// `σ((knee − d) / softness + w · (1 − 2·row/(H−1)))`.
pub fn sky_mask(img: &RgbdImage, cfg: &SkyMaskConfig) -> Grid {
    let h = img.height;
    Grid::from_fn(img.width, h, |x, y| {
        let row = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 };
        let logit = (cfg.disparity_knee - img.disparity_at(x, y)) / cfg.softness
            + cfg.row_prior_weight * (1.0 - 2.0 * row);
        nz_autograd::sigmoid(logit)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyCorrectionConfig {
    pub sky_disparity_cap: f64,
    /// Canvas size relative to the frame, per axis.
    pub canvas_scale: f64,
}

impl Default for SkyCorrectionConfig {
    fn default() -> Self {
        Self {
            sky_disparity_cap: 1e-3,
            canvas_scale: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkyCanvas {
    pub width: usize,
    pub height: usize,
    /// Planar `[3, H', W']`.
    pub rgb: Vec<f64>,
    pub disparity: Vec<f64>,
    pub coverage: Vec<f64>,
    pub anchor_rotation: Mat3,
    pub intrinsics: Intrinsics,
}

impl SkyCanvas {
    /// Canvas anchored at `anchor_rotation`, seeded with the sky of `start`
    /// (coverage = its sky mask; zero outside the starting frame).
    pub fn from_start(start: &RgbdImage, mask: &Grid, k: &Intrinsics, anchor_rotation: Mat3, cfg: &SkyCorrectionConfig) -> Result<Self> {
        start.ensure_shape(k.width, k.height)?;
        if !mask.same_shape(&start.disparity_grid()) {
            return Err(crate::error::shape_err("sky mask shaped like the frame", format!("{}x{}", mask.width, mask.height)));
        }
        let margin = |n: usize| (((cfg.canvas_scale - 1.0).max(0.0) * n as f64) / 2.0).round() as usize;
        let (ox, oy) = (margin(k.width), margin(k.height));
        let (w, h) = (k.width + 2 * ox, k.height + 2 * oy);
        let intrinsics = Intrinsics::new(k.fx, k.fy, k.cx + ox as f64, k.cy + oy as f64, w, h)?;
        let n = w * h;
        let src_n = start.pixels();
        let mut rgb = vec![0.0; 3 * n];
        let mut coverage = vec![0.0; n];
        for y in 0..k.height {
            for x in 0..k.width {
                let i = (y + oy) * w + x + ox;
                let s = y * k.width + x;
                for c in 0..3 {
                    rgb[c * n + i] = start.rgb[c * src_n + s];
                }
                coverage[i] = mask.data[s].clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            rgb,
            disparity: vec![cfg.sky_disparity_cap; n],
            coverage,
            anchor_rotation,
            intrinsics,
        })
    }

    pub fn mean_coverage(&self) -> f64 {
        self.coverage.iter().sum::<f64>() / self.coverage.len() as f64
    }

    /// Debug snapshot; colour premultiplied by coverage.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.width * self.height;
        let rgb = (0..3 * n).map(|j| self.rgb[j] * self.coverage[j % n]).collect();
        RgbdImage::from_rgb_disparity(self.width, self.height, rgb, self.disparity.clone())?.save_png(path)
    }
}

/// Blend canvas sky into `current` (seen with cumulative `rotation` relative
/// to the start view) and write newly observed sky back into the canvas.
pub fn correct_sky(
    current: &RgbdImage,
    rotation: &Mat3,
    mask: &Grid,
    k: &Intrinsics,
    canvas: &mut SkyCanvas,
    cfg: &SkyCorrectionConfig,
) -> Result<RgbdImage> {
    current.ensure_shape(k.width, k.height)?;
    let rel = canvas.anchor_rotation.transpose() * rotation;
    let (w, h) = (current.width, current.height);
    let n = w * h;
    let cn = canvas.width * canvas.height;
    let kc = canvas.intrinsics.matrix();
    let to_canvas = kc * rel * k.inverse_matrix();
    let mut out = current.clone();
    let mut px = [0.0; 4];
    // canvas colour and coverage sampled together
    let mut canvas_planes = canvas.rgb.clone();
    canvas_planes.extend_from_slice(&canvas.coverage);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mask.data[i].clamp(0.0, 1.0);
            if m > 0.5 {
                out.disparity[i] = out.disparity[i].min(cfg.sky_disparity_cap);
            }
            if m <= 0.0 {
                continue;
            }
            let p = to_canvas * Vec3::new(x as f64, y as f64, 1.0);
            if p.z <= 1e-12 {
                continue;
            }
            if !sample_bilinear(&canvas_planes, 4, canvas.width, canvas.height, p.x / p.z, p.y / p.z, &mut px) {
                continue;
            }
            // pixels classified as sky (m > 0.5, disparity capped above) take the
            // canvas colour fully; below that the blend ramps down to 0
            let alpha = (2.0 * m).min(1.0) * px[3].clamp(0.0, 1.0);
            for c in 0..3 {
                let cur = current.rgb[c * n + i];
                out.rgb[c * n + i] = (alpha * px[c] + (1.0 - alpha) * cur).clamp(0.0, 1.0);
            }
        }
    }

    // write-back: canvas pixel -> current frame
    let to_frame = k.matrix() * rel.transpose() * canvas.intrinsics.inverse_matrix();
    let mut frame_planes = out.rgb.clone();
    frame_planes.extend_from_slice(&mask.data);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let i = y * canvas.width + x;
            let c = canvas.coverage[i];
            if c >= 1.0 {
                continue;
            }
            let p = to_frame * Vec3::new(x as f64, y as f64, 1.0);
            if p.z <= 1e-12 {
                continue;
            }
            if !sample_bilinear(&frame_planes, 4, w, h, p.x / p.z, p.y / p.z, &mut px) {
                continue;
            }
            let s = px[3].clamp(0.0, 1.0);
            let gain = (1.0 - c) * s;
            if gain <= 0.0 {
                continue;
            }
            let new_c = c + gain;
            for ch in 0..3 {
                let old = canvas.rgb[ch * cn + i];
                canvas.rgb[ch * cn + i] = (c * old + gain * px[ch]) / new_c;
            }
            canvas.coverage[i] = new_c.min(1.0);
        }
    }
    Ok(out)
}
