//! Refinement network and discriminator.
//!
//! The refiner is a co-modulated encoder/generator: an encoder summarizes the
//! warped RGBD frame and its mask into a global code `z0` plus per-scale skip
//! features, a mapping MLP transforms the noise, and every generator
//! convolution is modulated by an affine map of `concat(z0, w)`. The output is
//! a mask-gated residual in logit space, so visible content passes through
//! and holes are synthesized.
//!
//! All layers use equalized learning rate (weights stored at unit variance,
//! scaled by `1/sqrt(fan_in)` at run time).

use nz_autograd::{Array, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{RgbdImage, RgbdVar};
use crate::params::{Bound, Params};
use crate::renderer::{WarpResult, WarpedVar};

pub const LRELU_SLOPE: f64 = 0.2;
/// Lower bound of refined disparity.
pub const DISPARITY_FLOOR: f64 = 1e-3;
const LOGIT_EPS: f64 = 1e-3;
/// Scale of the residual detail head relative to the hole head.
const RESIDUAL_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub latent_dim: usize,
    pub image_size: usize,
    pub mapping_layers: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_scales: 4,
            latent_dim: 64,
            image_size: 64,
            mapping_layers: 2,
        }
    }
}

impl RefinerConfig {
    /// Config for a given resolution, `4 · 2^num_scales`.
    pub fn for_size(image_size: usize, base_channels: usize, latent_dim: usize) -> Result<Self> {
        let cfg = Self {
            base_channels,
            num_scales: (image_size / 4).max(1).trailing_zeros() as usize,
            latent_dim,
            image_size,
            mapping_layers: 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.image_size != 4 << self.num_scales {
            return Err(Error::Config(format!(
                "image_size {} must equal 4 * 2^num_scales (num_scales {} >= 1)",
                self.image_size, self.num_scales
            )));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("latent_dim and base_channels must be > 0".into()));
        }
        Ok(())
    }

    /// Channels at pyramid level `l` (resolution `4 · 2^l`): wider at coarse
    /// levels, capped at four times the base.
    pub fn channels(&self, level: usize) -> usize {
        let up = (self.num_scales - level).min(2);
        self.base_channels << up
    }
}

// ---- layers -------------------------------------------------------------

fn gain(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn init_linear<R: Rng>(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, bias: f64, rng: &mut R) {
    p.init_normal(&format!("{name}.w"), &[fan_in, fan_out], rng);
    p.init_const(&format!("{name}.b"), &[1, fan_out], bias);
}

fn init_conv<R: Rng>(p: &mut Params, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    p.init_normal(&format!("{name}.w"), &[cout, cin, k, k], rng);
    p.init_const(&format!("{name}.b"), &[1, cout, 1, 1], 0.0);
}

/// `x @ (w · gain) + b` for `x: [N, in]`.
fn linear(b: &Bound, name: &str, x: &Var) -> Var {
    let w = b.v(&format!("{name}.w"));
    let g = gain(w.shape()[0]);
    x.matmul(&w.scale(g)).add(b.v(&format!("{name}.b")))
}

fn conv(b: &Bound, name: &str, x: &Var) -> Var {
    let w = b.v(&format!("{name}.w"));
    let s = w.shape();
    let g = gain(s[1] * s[2] * s[3]);
    x.conv2d(&w.scale(g), 1, s[2] / 2).add(b.v(&format!("{name}.b")))
}

/// Modulated convolution: input channels scaled by `style: [N, I]`, then
/// (optionally) each output channel demodulated to unit expected variance.
fn modconv(b: &Bound, name: &str, x: &Var, style: &Var, demodulate: bool) -> Var {
    let w = b.v(&format!("{name}.w"));
    let s = w.shape().to_vec();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    let n = style.shape()[0];
    let wg = w.scale(gain(cin * k * k));
    let xs = x.mul(&style.reshape(&[n, cin, 1, 1]));
    let mut y = xs.conv2d(&wg, 1, k / 2);
    if demodulate {
        // sum over kernel taps of w^2: [O, I] -> [I, O]
        let w2 = wg.square().sum_axis(3).sum_axis(2).reshape(&[cout, cin]).t();
        let d = style.square().matmul(&w2).add_scalar(1e-8).powf(-0.5);
        y = y.mul(&d.reshape(&[n, cout, 1, 1]));
    }
    y.add(b.v(&format!("{name}.b")))
}

fn lrelu(x: &Var) -> Var {
    x.leaky_relu(LRELU_SLOPE)
}

fn flatten(x: &Var) -> Var {
    let s = x.shape();
    x.reshape(&[s[0], s[1..].iter().product()])
}

/// `ln(x / (1 − x))` of `x` clamped into `(ε, 1 − ε)`.
fn logit(x: &Var) -> Var {
    let c = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    c.ln().sub(&c.neg().add_scalar(1.0).ln())
}

// ---- refiner ------------------------------------------------------------

pub fn init_refiner(cfg: &RefinerConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    let mut p = Params::new();
    let s = cfg.num_scales;
    let l = cfg.latent_dim;
    // encoder: level s (full res) down to 0 (4x4)
    init_conv(&mut p, "enc.in", 5, cfg.channels(s), 1, &mut rng);
    for lev in (0..=s).rev() {
        let c = cfg.channels(lev);
        init_conv(&mut p, &format!("enc.l{lev}.conv"), c, c, 3, &mut rng);
        if lev > 0 {
            init_conv(&mut p, &format!("enc.l{lev}.down"), c, cfg.channels(lev - 1), 3, &mut rng);
        }
    }
    init_linear(&mut p, "enc.z0", cfg.channels(0) * 16, l, 0.0, &mut rng);
    // mapping network
    for i in 0..cfg.mapping_layers {
        init_linear(&mut p, &format!("gen.map{i}"), l, l, 0.0, &mut rng);
    }
    // generator
    let styled = |p: &mut Params, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
        init_linear(p, &format!("{name}.style"), 2 * l, cin, 1.0, rng);
        init_conv(p, name, cin, cout, k, rng);
    };
    styled(&mut p, "gen.l0.conv", cfg.channels(0), cfg.channels(0), 3, &mut rng);
    for lev in 1..=s {
        styled(&mut p, &format!("gen.l{lev}.up"), cfg.channels(lev - 1), cfg.channels(lev), 3, &mut rng);
        styled(&mut p, &format!("gen.l{lev}.conv"), cfg.channels(lev), cfg.channels(lev), 3, &mut rng);
    }
    styled(&mut p, "gen.out", cfg.channels(s), 8, 1, &mut rng);
    p
}

fn styled_conv(b: &Bound, name: &str, x: &Var, code: &Var, demodulate: bool) -> Var {
    let style = linear(b, &format!("{name}.style"), code);
    modconv(b, name, x, &style, demodulate)
}

/// Differentiable refinement of a warped frame. `noise: [1, latent_dim]`.
pub fn refine_var(b: &Bound, cfg: &RefinerConfig, warped: &WarpedVar, noise: &Var) -> Result<RgbdVar> {
    let size = cfg.image_size;
    let img = &warped.image;
    if img.rgb.shape() != [1, 3, size, size] || warped.mask.shape() != [1, 1, size, size] {
        return Err(shape_err(
            format!("[1, 3, {size}, {size}] colour and [1, 1, {size}, {size}] mask"),
            format!("{:?} / {:?}", img.rgb.shape(), warped.mask.shape()),
        ));
    }
    if noise.shape() != [1, cfg.latent_dim] {
        return Err(shape_err(format!("noise [1, {}]", cfg.latent_dim), format!("{:?}", noise.shape())));
    }
    let s = cfg.num_scales;
    let mask = &warped.mask;
    let disp01 = img.disparity.clamp(0.0, 1.0);

    // encoder
    let input = Var::concat(&[&img.rgb.scale(2.0).add_scalar(-1.0), &disp01.scale(2.0).add_scalar(-1.0), mask], 1);
    let mut x = lrelu(&conv(b, "enc.in", &input));
    let mut skips = vec![None; s + 1];
    for lev in (0..=s).rev() {
        x = lrelu(&conv(b, &format!("enc.l{lev}.conv"), &x));
        skips[lev] = Some(x.clone());
        if lev > 0 {
            x = lrelu(&conv(b, &format!("enc.l{lev}.down"), &x)).avg_pool2();
        }
    }
    let z0 = lrelu(&linear(b, "enc.z0", &flatten(&x)));

    // mapping
    let mut w = noise.div(&noise.square().mean().add_scalar(1e-8).sqrt());
    for i in 0..cfg.mapping_layers {
        w = lrelu(&linear(b, &format!("gen.map{i}"), &w));
    }
    let code = Var::concat(&[&z0, &w], 1);

    // generator
    let mut y = lrelu(&styled_conv(b, "gen.l0.conv", skips[0].as_ref().unwrap(), &code, true));
    for lev in 1..=s {
        y = lrelu(&styled_conv(b, &format!("gen.l{lev}.up"), &y.upsample2(), &code, true));
        y = y.add(skips[lev].as_ref().unwrap());
        y = lrelu(&styled_conv(b, &format!("gen.l{lev}.conv"), &y, &code, true));
    }
    let head = styled_conv(b, "gen.out", &y, &code, false);
    let hole = head.slice(1, 0, 4);
    let detail = head.slice(1, 4, 4).scale(RESIDUAL_SCALE);

    // mask-gated composition in logit space
    let visible = Var::concat(
        &[&logit(&img.rgb), &logit(&disp01.add_scalar(-DISPARITY_FLOOR).scale(1.0 / (1.0 - DISPARITY_FLOOR)))],
        1,
    );
    let inv = mask.neg().add_scalar(1.0);
    let pre = visible.mul(mask).add(&hole.mul(&inv)).add(&detail);
    let out = pre.sigmoid();
    let rgb = out.slice(1, 0, 3);
    let disparity = out.slice(1, 3, 1).scale(1.0 - DISPARITY_FLOOR).add_scalar(DISPARITY_FLOOR);
    Ok(RgbdVar {
        rgb,
        disparity,
        validity: Var::constant(Array::ones(&[1, 1, size, size])),
    })
}

// ---- discriminator ------------------------------------------------------

pub fn init_discriminator(cfg: &RefinerConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002);
    let mut p = Params::new();
    let s = cfg.num_scales;
    init_conv(&mut p, "disc.in", 4, cfg.channels(s), 1, &mut rng);
    for lev in (1..=s).rev() {
        init_conv(&mut p, &format!("disc.l{lev}.conv"), cfg.channels(lev), cfg.channels(lev), 3, &mut rng);
        init_conv(&mut p, &format!("disc.l{lev}.down"), cfg.channels(lev), cfg.channels(lev - 1), 3, &mut rng);
    }
    init_conv(&mut p, "disc.l0.conv", cfg.channels(0), cfg.channels(0), 3, &mut rng);
    init_linear(&mut p, "disc.fc", cfg.channels(0) * 16, cfg.channels(0), 0.0, &mut rng);
    init_linear(&mut p, "disc.logit", cfg.channels(0), 1, 0.0, &mut rng);
    p
}

/// Logits `[N, 1]` for a batch of RGBD inputs `[N, 4, S, S]`.
pub fn discriminate_var(b: &Bound, cfg: &RefinerConfig, rgbd: &Var) -> Result<Var> {
    let size = cfg.image_size;
    match rgbd.shape() {
        [_, 4, h, w] if *h == size && *w == size => {}
        s => return Err(shape_err(format!("[N, 4, {size}, {size}]"), format!("{s:?}"))),
    }
    let mut x = lrelu(&conv(b, "disc.in", rgbd));
    for lev in (1..=cfg.num_scales).rev() {
        x = lrelu(&conv(b, &format!("disc.l{lev}.conv"), &x));
        x = lrelu(&conv(b, &format!("disc.l{lev}.down"), &x)).avg_pool2();
    }
    x = lrelu(&conv(b, "disc.l0.conv", &x));
    let h = lrelu(&linear(b, "disc.fc", &flatten(&x)));
    Ok(linear(b, "disc.logit", &h))
}

// ---- state --------------------------------------------------------------

/// Live refiner (encoder + generator), its EMA shadow, and the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerState {
    pub config: RefinerConfig,
    pub refiner: Params,
    pub ema: Params,
    pub discriminator: Params,
    pub step: u64,
}

impl RefinerState {
    pub fn new(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let refiner = init_refiner(&config, seed);
        Ok(Self {
            config,
            ema: refiner.clone(),
            refiner,
            discriminator: init_discriminator(&config, seed),
            step: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.refiner.ensure_same_layout(&init_refiner(&self.config, 0), "refiner")?;
        self.ema.ensure_same_layout(&self.refiner, "ema shadow")?;
        self.discriminator.ensure_same_layout(&init_discriminator(&self.config, 0), "discriminator")?;
        if !(self.refiner.all_finite() && self.ema.all_finite() && self.discriminator.all_finite()) {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(())
    }

    /// `shadow ← decay · shadow + (1 − decay) · live` over the refiner only.
    pub fn ema_update(&mut self, decay: f64) {
        for (name, shadow) in self.ema.iter_mut() {
            let live = self.refiner.get(name).expect("ema mirrors live parameters");
            for (s, l) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = decay * *s + (1.0 - decay) * l;
            }
        }
    }

    /// Value-level refinement with frozen parameters.
    pub fn refine(&self, warped: &WarpResult, noise: &[f64], use_ema: bool) -> Result<RgbdImage> {
        let params = if use_ema { &self.ema } else { &self.refiner };
        let b = Bound::new(params, false);
        let noise = Var::constant(
            Array::from_vec(&[1, noise.len()], noise.to_vec()).map_err(|e| Error::Config(e.to_string()))?,
        );
        refine_var(&b, &self.config, &WarpedVar::constant(warped), &noise)?.to_image()
    }

    pub fn discriminate(&self, candidate: &RgbdImage) -> Result<f64> {
        let b = Bound::new(&self.discriminator, false);
        Ok(discriminate_var(&b, &self.config, &Var::constant(candidate.rgbd_array()))?.item())
    }
}

pub fn sample_noise<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Vec<f64> {
    (0..latent_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraPose, Intrinsics};
    use crate::image::Grid;
    use crate::renderer::{warp, SplatConfig};

    fn small(size: usize) -> RefinerConfig {
        RefinerConfig::for_size(size, 4, 8).unwrap()
    }

    fn sample_input(size: usize) -> WarpResult {
        let img = RgbdImage::from_fn(size, size, |x, y| {
            ([0.2 + 0.6 * x as f64 / size as f64, 0.5, 0.3 + 0.4 * y as f64 / size as f64], 0.2 + 0.3 * y as f64 / size as f64)
        });
        let k = Intrinsics::square(size, 1.0);
        warp(&img, &CameraPose::translation(0.05, 0.0, 0.1), &k, &SplatConfig::default()).unwrap()
    }

    #[test]
    fn shapes_and_invariants() {
        for size in [32, 64] {
            let state = RefinerState::new(small(size), 1).unwrap();
            let out = state.refine(&sample_input(size), &[0.3; 8], true).unwrap();
            assert_eq!((out.width, out.height), (size, size));
            assert!(out.disparity.iter().all(|&d| (DISPARITY_FLOOR..=1.0).contains(&d)));
            out.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_and_noise_sensitive() {
        let state = RefinerState::new(small(32), 2).unwrap();
        let input = sample_input(32);
        let a = state.refine(&input, &[0.1; 8], false).unwrap();
        let b = state.refine(&input, &[0.1; 8], false).unwrap();
        assert_eq!(a, b);
        let c = state.refine(&input, &[-0.7; 8].iter().enumerate().map(|(i, v)| v + i as f64 * 0.2).collect::<Vec<_>>(), false).unwrap();
        assert!(a.rgb_l1(&c) > 0.0);
    }

    #[test]
    fn holes_follow_noise() {
        let state = RefinerState::new(small(32), 3).unwrap();
        let mut input = sample_input(32);
        // carve a hole in the middle
        input.mask = Grid::from_fn(32, 32, |x, y| if (8..24).contains(&x) && (8..24).contains(&y) { 0.0 } else { 1.0 });
        let a = state.refine(&input, &sample_noise(8, &mut ChaCha8Rng::seed_from_u64(1)), false).unwrap();
        let b = state.refine(&input, &sample_noise(8, &mut ChaCha8Rng::seed_from_u64(2)), false).unwrap();
        let diff: f64 = (8..24).flat_map(|y| (8..24).map(move |x| (x, y))).map(|(x, y)| {
            let (p, q) = (a.color(x, y), b.color(x, y));
            (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>()
        }).sum();
        assert!(diff > 1e-3, "hole content ignores noise: {diff}");
    }

    #[test]
    fn ema_closed_form() {
        let mut state = RefinerState::new(small(8), 0).unwrap();
        for (_, v) in state.ema.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        for (_, v) in state.refiner.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        for _ in 0..3 {
            state.ema_update(0.99);
        }
        for (_, v) in state.ema.iter() {
            assert!(v.data().iter().all(|x| (x - 0.029701).abs() < 1e-9));
        }
    }

    #[test]
    fn batched_discriminator_matches_items() {
        let cfg = small(8);
        let state = RefinerState::new(cfg, 4).unwrap();
        let a = RgbdImage::from_fn(8, 8, |x, y| ([x as f64 / 8.0, y as f64 / 8.0, 0.5], 0.3));
        let c = RgbdImage::from_fn(8, 8, |x, _| ([0.1, 0.9, x as f64 / 8.0], 0.7));
        let batch = Array::concat(&[&a.rgbd_array(), &c.rgbd_array()], 0);
        let b = Bound::new(&state.discriminator, false);
        let logits = discriminate_var(&b, &cfg, &Var::constant(batch)).unwrap();
        assert!((logits.value().data()[0] - state.discriminate(&a).unwrap()).abs() < 1e-12);
        assert!((logits.value().data()[1] - state.discriminate(&c).unwrap()).abs() < 1e-12);
    }
}
