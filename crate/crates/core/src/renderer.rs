//! Differentiable forward warping by softmax splatting.
//!
//! Every source pixel with positive disparity is lifted to 3-D, moved into the
//! target camera, projected, and splatted onto the four target pixels around
//! its projection with bilinear weights. Overlapping contributions are blended
//! with importance `exp(beta · disparity)`, so nearer content wins as `beta`
//! grows. Target pixels whose accumulated bilinear weight falls below
//! `weight_floor` are holes: their mask and content are zero.
//!
//! Projection uses the homogeneous form
//! `u' = fx · (a_x − d·b_x) / (a_z − d·b_z) + cx`, with `a = Rᵀ·ray`,
//! `b = Rᵀ·t` and `d` the source disparity, which stays finite as `d → 0`
//! and reduces to the plane-at-infinity homography there.

use nz_autograd::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Mat3};
use crate::image::{Grid, RgbdImage, RgbdVar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplatConfig {
    /// Softmax importance temperature on disparity.
    pub beta: f64,
    /// Accumulated bilinear weight below which a target pixel is a hole.
    pub weight_floor: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            weight_floor: 0.05,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("splat beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0) {
            return Err(Error::Config(format!(
                "splat weight_floor must lie in (0, 1), got {}",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WarpResult {
    pub image: RgbdImage,
    /// Soft coverage in `[0, 1]`; 0 marks holes.
    pub mask: Grid,
}

/// Differentiable warp output; all fields `[1, C, H, W]`.
#[derive(Clone, Debug)]
pub struct WarpedVar {
    pub image: RgbdVar,
    pub mask: Var,
}

impl WarpedVar {
    pub fn to_result(&self) -> Result<WarpResult> {
        Ok(WarpResult {
            image: self.image.to_image()?,
            mask: Grid::from_array(self.mask.value())?,
        })
    }

    pub fn constant(w: &WarpResult) -> Self {
        Self {
            image: RgbdVar::constant(&w.image),
            mask: Var::constant(w.mask.to_array()),
        }
    }
}

/// Disparities below the smallest normal `f64` are treated as underflowed and
/// never splatted.
const MIN_DISPARITY: f64 = f64::MIN_POSITIVE;

/// Projection of one source pixel into the target view.
#[derive(Clone, Copy, Debug)]
struct Projected {
    u: f64,
    v: f64,
    du: f64,
    dv: f64,
    /// Target-frame disparity and its derivative with respect to the source
    /// disparity.
    disp: f64,
    ddisp: f64,
    log_importance: f64,
}

fn project_sources(disparity: &[f64], width: usize, height: usize, relative: &CameraPose, k: &Intrinsics, beta: f64) -> Vec<Option<Projected>> {
    let rt = relative.rotation.transpose();
    let b = rt * relative.translation;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d = disparity[y * width + x];
            if !(d >= MIN_DISPARITY) || !d.is_finite() {
                out.push(None);
                continue;
            }
            let a = rt * k.ray(x as f64, y as f64);
            let nx = a.x - d * b.x;
            let ny = a.y - d * b.y;
            let den = a.z - d * b.z;
            // in front of the target camera: depth (den / d) must be positive
            if !(den > 1e-9) {
                out.push(None);
                continue;
            }
            let den2 = den * den;
            let u = k.fx * nx / den + k.cx;
            let v = k.fy * ny / den + k.cy;
            if !(u.is_finite() && v.is_finite()) {
                out.push(None);
                continue;
            }
            out.push(Some(Projected {
                u,
                v,
                du: k.fx * (-b.x * den + nx * b.z) / den2,
                dv: k.fy * (-b.y * den + ny * b.z) / den2,
                disp: d / den,
                ddisp: a.z / den2,
                log_importance: beta * d,
            }));
        }
    }
    out
}

/// In-frame bilinear corners of a projection: `(target index, weight,
/// ∂weight/∂u, ∂weight/∂v)`.
fn corners(p: &Projected, width: usize, height: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
    let x0 = p.u.floor();
    let y0 = p.v.floor();
    let fx = p.u - x0;
    let fy = p.v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ]
    .into_iter()
    .filter(move |&(x, y, w, _, _)| {
        w > 0.0 && x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height
    })
    .map(move |(x, y, w, dwu, dwv)| (y as usize * width + x as usize, w, dwu, dwv))
}

/// Forward pass bookkeeping shared with the backward pass.
struct SplatForward {
    sources: Vec<Option<Projected>>,
    /// Per-target maximum log-importance, used to normalize exponentials.
    max_log: Vec<f64>,
    coverage: Vec<f64>,
    norm: Vec<f64>,
}

/// Splat `channels` planar features (plus the transformed disparity) from the
/// source view. Returns `[channels..., disparity, mask]` planes and the
/// bookkeeping needed for gradients.
fn splat_forward(
    features: &[f64],
    channels: usize,
    disparity: &[f64],
    width: usize,
    height: usize,
    relative: &CameraPose,
    k: &Intrinsics,
    cfg: &SplatConfig,
) -> (Vec<f64>, SplatForward) {
    let n = width * height;
    let sources = project_sources(disparity, width, height, relative, k, cfg.beta);
    let mut max_log = vec![f64::NEG_INFINITY; n];
    for p in sources.iter().flatten() {
        for (q, _, _, _) in corners(p, width, height) {
            max_log[q] = max_log[q].max(p.log_importance);
        }
    }
    let out_ch = channels + 2;
    let mut out = vec![0.0; out_ch * n];
    let mut coverage = vec![0.0; n];
    let mut norm = vec![0.0; n];
    for (s, p) in sources.iter().enumerate() {
        let Some(p) = p else { continue };
        for (q, b, _, _) in corners(p, width, height) {
            let w = b * (p.log_importance - max_log[q]).exp();
            coverage[q] += b;
            norm[q] += w;
            for c in 0..channels {
                out[c * n + q] += w * features[c * n + s];
            }
            out[channels * n + q] += w * p.disp;
        }
    }
    for q in 0..n {
        if coverage[q] < cfg.weight_floor || norm[q] <= 0.0 {
            for c in 0..=channels {
                out[c * n + q] = 0.0;
            }
            out[(channels + 1) * n + q] = 0.0;
        } else {
            for c in 0..=channels {
                out[c * n + q] /= norm[q];
            }
            out[(channels + 1) * n + q] = coverage[q].min(1.0);
        }
    }
    (
        out,
        SplatForward {
            sources,
            max_log,
            coverage,
            norm,
        },
    )
}

/// Gradients with respect to the source features and source disparity.
#[allow(clippy::too_many_arguments)]
fn splat_backward(
    fwd: &SplatForward,
    features: &[f64],
    channels: usize,
    out: &[f64],
    grad: &[f64],
    width: usize,
    height: usize,
    cfg: &SplatConfig,
) -> (Vec<f64>, Vec<f64>) {
    let n = width * height;
    let mut g_feat = vec![0.0; channels * n];
    let mut g_disp = vec![0.0; n];
    let live = |q: usize| fwd.coverage[q] >= cfg.weight_floor && fwd.norm[q] > 0.0;
    for (s, p) in fwd.sources.iter().enumerate() {
        let Some(p) = p else { continue };
        let mut gd = 0.0;
        let mut g_own_disp = 0.0;
        for (q, b, dbu, dbv) in corners(p, width, height) {
            if !live(q) {
                continue;
            }
            let e = (p.log_importance - fwd.max_log[q]).exp();
            let z = fwd.norm[q];
            // dL/dw for w = b·e
            let mut a = 0.0;
            for c in 0..channels {
                let g = grad[c * n + q];
                a += g * (features[c * n + s] - out[c * n + q]);
                g_feat[c * n + s] += g * b * e / z;
            }
            let gdisp = grad[channels * n + q];
            a += gdisp * (p.disp - out[channels * n + q]);
            g_own_disp += gdisp * b * e / z;
            a /= z;
            // mask = min(coverage, 1)
            let gmask = if fwd.coverage[q] < 1.0 {
                grad[(channels + 1) * n + q]
            } else {
                0.0
            };
            let g_b = a * e + gmask;
            gd += g_b * (dbu * p.du + dbv * p.dv) + a * b * e * cfg.beta;
        }
        g_disp[s] = gd + g_own_disp * p.ddisp;
    }
    (g_feat, g_disp)
}

fn check_plane(v: &Var, channels: Option<usize>, what: &str) -> Result<(usize, usize, usize)> {
    match v.shape() {
        [1, c, h, w] if channels.is_none_or(|want| want == *c) => Ok((*c, *h, *w)),
        s => Err(shape_err(format!("{what} [1, C, H, W]"), format!("{s:?}"))),
    }
}

/// Differentiable splat of arbitrary feature planes. Returns
/// `[1, C + 2, H, W]`: the warped features, the target-frame disparity, and
/// the soft coverage mask.
pub fn splat_var(features: &Var, disparity: &Var, relative: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<Var> {
    let (channels, h, w) = check_plane(features, None, "features")?;
    let (_, dh, dw) = check_plane(disparity, Some(1), "disparity")?;
    if (dh, dw) != (h, w) || (k.width, k.height) != (w, h) {
        return Err(shape_err(format!("{w}x{h} for all inputs"), format!("disparity {dw}x{dh}, intrinsics {}x{}", k.width, k.height)));
    }
    let (out, fwd) = splat_forward(
        features.value().data(),
        channels,
        disparity.value().data(),
        w,
        h,
        relative,
        k,
        cfg,
    );
    let value = Array::from_vec(&[1, channels + 2, h, w], out).expect("splat output shape");
    let cfg = *cfg;
    Ok(Var::from_op(
        value,
        vec![features.clone(), disparity.clone()],
        Box::new(move |g, parents, out| {
            let (gf, gd) = splat_backward(
                &fwd,
                parents[0].value().data(),
                channels,
                out.data(),
                g.data(),
                w,
                h,
                &cfg,
            );
            vec![
                Some(Array::from_vec(&[1, channels, h, w], gf).expect("feature grad")),
                Some(Array::from_vec(&[1, 1, h, w], gd).expect("disparity grad")),
            ]
        }),
    ))
}

/// Unclamped bilinear weight accumulated at each target pixel when `src` is
/// splatted to `relative`; the warp mask is this clamped to 1.
pub fn splat_coverage(src: &RgbdImage, relative: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<Vec<f64>> {
    relative.validate()?;
    src.ensure_shape(k.width, k.height)?;
    let (_, fwd) = splat_forward(&src.validity, 1, &src.disparity, src.width, src.height, relative, k, cfg);
    Ok(fwd.coverage)
}

/// Differentiable warp of an RGBD image to the camera at `relative`.
pub fn warp_var(src: &RgbdVar, relative: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<WarpedVar> {
    let features = Var::concat(&[&src.rgb, &src.validity], 1);
    let out = splat_var(&features, &src.disparity, relative, k, cfg)?;
    Ok(WarpedVar {
        image: RgbdVar {
            rgb: out.slice(1, 0, 3),
            validity: out.slice(1, 3, 1),
            disparity: out.slice(1, 4, 1),
        },
        mask: out.slice(1, 5, 1),
    })
}

pub fn warp(src: &RgbdImage, relative: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<WarpResult> {
    relative.validate()?;
    src.ensure_shape(k.width, k.height)?;
    warp_var(&RgbdVar::constant(src), relative, k, cfg)?.to_result()
}

/// Warp to a virtual view and back again. The virtual view's coverage is
/// binarized at 0.5 and travels back with the content; the returned mask is the
/// binarized product of that carried mask and the return coverage, and colour
/// and disparity are multiplied by it. Gradients reach the source colour
/// through the splats; the mask itself is a constant.
pub fn cycle_warp_var(src: &RgbdVar, virtual_pose: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<WarpedVar> {
    let binarize = |v: &Var| Var::constant(v.value().map(|m| if m >= 0.5 { 1.0 } else { 0.0 }));
    let there = warp_var(src, virtual_pose, k, cfg)?;
    let features = Var::concat(&[&there.image.rgb, &binarize(&there.mask)], 1);
    let back = splat_var(&features, &there.image.disparity, &virtual_pose.invert(), k, cfg)?;
    let carried = back.slice(1, 3, 1);
    let coverage = back.slice(1, 5, 1);
    let mask = binarize(&carried.mul(&coverage));
    Ok(WarpedVar {
        image: RgbdVar {
            rgb: back.slice(1, 0, 3).mul(&mask),
            disparity: back.slice(1, 4, 1).mul(&mask),
            validity: mask.clone(),
        },
        mask,
    })
}

pub fn cycle_warp(src: &RgbdImage, virtual_pose: &CameraPose, k: &Intrinsics, cfg: &SplatConfig) -> Result<WarpResult> {
    virtual_pose.validate()?;
    src.ensure_shape(k.width, k.height)?;
    cycle_warp_var(&RgbdVar::constant(src), virtual_pose, k, cfg)?.to_result()
}

/// `K · Rᵀ · K⁻¹`: maps starting-view pixels to pixels of a camera rotated by
/// `rotation`, for content at infinite depth.
pub fn infinity_homography(rotation: &Mat3, k: &Intrinsics) -> Mat3 {
    k.matrix() * rotation.transpose() * k.inverse_matrix()
}

/// Apply a homography to pixel coordinates; `None` when the point maps to or
/// behind infinity.
pub fn apply_homography(h: &Mat3, u: f64, v: f64) -> Option<(f64, f64)> {
    let p = h * crate::geometry::Vec3::new(u, v, 1.0);
    (p.z > 1e-12).then(|| (p.x / p.z, p.y / p.z))
}

/// Bilinear sample of a planar `[C, H, W]` buffer. Returns `None` outside the
/// sampling domain `[0, W-1] × [0, H-1]`.
pub fn sample_bilinear(planes: &[f64], channels: usize, width: usize, height: usize, u: f64, v: f64, out: &mut [f64]) -> bool {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return false;
    }
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let n = width * height;
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let p = &planes[c * n..(c + 1) * n];
        let top = p[y0 * width + x0] * (1.0 - fx) + p[y0 * width + x1] * fx;
        let bot = p[y1 * width + x0] * (1.0 - fx) + p[y1 * width + x1] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    true
}

/// Backward-map `src` colour through `h` (source → target pixels) to produce
/// the target view. Returns the colour planes and a coverage grid (1 where the
/// preimage fell inside the source).
pub fn resample_homography(src: &RgbdImage, h: &Mat3) -> (Vec<f64>, Grid) {
    let (w, hgt) = (src.width, src.height);
    let n = w * hgt;
    let inv = h.try_inverse().unwrap_or_else(Mat3::identity);
    let mut rgb = vec![0.0; 3 * n];
    let mut cover = Grid::filled(w, hgt, 0.0);
    let mut px = [0.0; 3];
    for y in 0..hgt {
        for x in 0..w {
            let Some((u, v)) = apply_homography(&inv, x as f64, y as f64) else { continue };
            if sample_bilinear(&src.rgb, 3, w, hgt, u, v, &mut px) {
                let i = y * w + x;
                for c in 0..3 {
                    rgb[c * n + i] = px[c];
                }
                cover.data[i] = 1.0;
            }
        }
    }
    (rgb, cover)
}
