//! Training objectives.

use nz_autograd::{softplus, Array, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbdVar;
use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1_start: f64,
    pub lambda1_traj: f64,
    pub lambda2: f64,
    pub lazy_interval: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1_start: 1.0,
            lambda1_traj: 0.05,
            lambda2: 0.15,
            lazy_interval: 16,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1_start, self.lambda1_traj, self.lambda2]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !ok || self.lazy_interval < 1 {
            return Err(Error::Config("loss weights must be >= 0 and lazy_interval >= 1".into()));
        }
        Ok(())
    }

    /// R1 fires on steps that are multiples of the lazy interval.
    pub fn r1_due(&self, step: u64) -> bool {
        step.is_multiple_of(self.lazy_interval)
    }
}

/// Multi-scale feature maps `φ^l` of an RGB tensor `[N, 3, H, W]`.
pub trait FeatureExtractor {
    fn features(&self, rgb: &Var) -> Vec<Var>;
}

/// The image itself at one scale.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features(&self, rgb: &Var) -> Vec<Var> {
        vec![rgb.clone()]
    }
}

/// Gaussian pyramid: the image, then repeated blur-and-halve.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: usize,
}

impl Default for PyramidFeatures {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

impl FeatureExtractor for PyramidFeatures {
    fn features(&self, rgb: &Var) -> Vec<Var> {
        let mut out = vec![rgb.clone()];
        for _ in 1..self.levels {
            let next = out.last().unwrap().blur_down2();
            out.push(next);
        }
        out
    }
}

/// `Σ_l mean|φ^l(pred) − φ^l(target)| + mean|D_pred − D_target|`.
pub fn reconstruction_loss(pred: &RgbdVar, target: &RgbdVar, features: &dyn FeatureExtractor) -> Var {
    let fp = features.features(&pred.rgb);
    let ft = features.features(&target.rgb);
    let mut total = pred.disparity.sub(&target.disparity).abs().mean();
    for (a, b) in fp.iter().zip(&ft) {
        total = total.add(&a.sub(b).abs().mean());
    }
    total
}

/// `mean softplus(−logit)`.
pub fn generator_adv_loss(fake_logits: &Var) -> Var {
    fake_logits.neg().softplus().mean()
}

/// `mean softplus(−real) + mean softplus(fake)`.
pub fn discriminator_adv_loss(real_logits: &Var, fake_logits: &Var) -> Var {
    real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())
}

pub fn generator_adv_value(logit: f64) -> f64 {
    softplus(-logit)
}

pub fn discriminator_adv_value(real_logit: f64, fake_logit: f64) -> f64 {
    softplus(-real_logit) + softplus(fake_logit)
}

/// R1 at a batch of real inputs.
#[derive(Clone, Debug)]
pub struct R1 {
    /// `mean_n ‖∂D(x_n)/∂x_n‖²`.
    pub value: f64,
    /// `∂ Σ_n D(x_n) / ∂x`, same shape as the batch.
    pub input_grad: Array,
}

/// Evaluate R1 for a critic given as a closure from input `[N, …]` to logits
/// `[N, 1]`. Items must not interact inside the critic.
pub fn r1_penalty(real: &Array, logits: impl Fn(&Var) -> Var) -> R1 {
    let x = Var::param(real.clone());
    let g = logits(&x).sum().backward().get_or_zeros(&x);
    let n = real.shape()[0].max(1);
    R1 {
        value: g.sq_norm() / n as f64,
        input_grad: g,
    }
}

/// Gradient of R1 with respect to critic parameters by a central
/// finite-difference Hessian-vector product along the input gradient:
/// `(2/N) · [∇θ ΣD(x + εg) − ∇θ ΣD(x − εg)] / (2ε)`.
///
/// `param_grad(x)` must return `∇θ Σ_n D(x_n)`.
pub fn r1_param_gradient(real: &Array, r1: &R1, param_grad: impl Fn(&Array) -> Params) -> Params {
    let g = &r1.input_grad;
    let rms = (g.sq_norm() / g.len().max(1) as f64).sqrt();
    let n = real.shape()[0].max(1) as f64;
    let probe = |sign: f64, eps: f64| {
        let x = real.zip_map(g, |x, g| x + sign * eps * g);
        param_grad(&x)
    };
    if rms < 1e-12 {
        let mut z = probe(1.0, 0.0);
        z.scale(0.0);
        return z;
    }
    // about 1e-6 per element: small enough that the probes rarely cross a
    // leaky-ReLU kink, large enough that cancellation stays near 1e-10
    let eps = 1e-6 / rms;
    let mut plus = probe(1.0, eps);
    let minus = probe(-1.0, eps);
    plus.add_scaled(&minus, -1.0);
    plus.scale(2.0 / (n * 2.0 * eps));
    plus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbdImage;

    #[test]
    fn adversarial_closed_forms() {
        let ln2 = 2f64.ln();
        assert!((generator_adv_value(0.0) - ln2).abs() < 1e-15);
        assert!((discriminator_adv_value(0.0, 0.0) - 2.0 * ln2).abs() < 1e-15);
        assert!((generator_adv_value(20.0) - 2.061_153_6e-9).abs() < 1e-15);
        assert!((discriminator_adv_value(20.0, -20.0) - 4.122_307_2e-9).abs() < 1e-15);
        let grid: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.4).collect();
        assert!(grid.windows(2).all(|w| generator_adv_value(w[1]) < generator_adv_value(w[0])));
        for (r, f) in [(0.3, -1.2), (2.0, 5.0), (-4.0, 0.1)] {
            assert!((discriminator_adv_value(r, f) - discriminator_adv_value(-f, -r)).abs() < 1e-15);
        }
        let v = generator_adv_loss(&Var::constant(Array::zeros(&[3, 1])));
        assert!((v.item() - ln2).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_closed_forms() {
        let a = RgbdImage::from_fn(4, 4, |x, y| ([0.1 * x as f64, 0.2, 0.05 * y as f64], 0.3));
        let mut b = a.clone();
        b.disparity.iter_mut().for_each(|d| *d += 0.1);
        let (va, vb) = (RgbdVar::constant(&a), RgbdVar::constant(&b));
        let f = PyramidFeatures::default();
        assert_eq!(reconstruction_loss(&va, &va, &f).item(), 0.0);
        assert!((reconstruction_loss(&vb, &va, &f).item() - 0.1).abs() < 1e-12);
        // identity features: direct arithmetic
        let c = RgbdImage::from_fn(4, 4, |x, y| ([((x * 7 + y * 3) % 5) as f64 / 5.0, 0.4, 0.9], 0.2 + 0.1 * x as f64));
        let want = a.rgb.iter().zip(&c.rgb).map(|(p, q)| (p - q).abs()).sum::<f64>() / 48.0
            + a.disparity.iter().zip(&c.disparity).map(|(p, q)| (p - q).abs()).sum::<f64>() / 16.0;
        let got = reconstruction_loss(&RgbdVar::constant(&a), &RgbdVar::constant(&c), &IdentityFeatures).item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn r1_linear_critic_is_weight_norm() {
        let w = nz_autograd::gradcheck::random_array(&[1, 4, 3, 3], 5);
        let x = nz_autograd::gradcheck::random_array(&[2, 4, 3, 3], 6);
        let wv = Var::constant(w.clone());
        let r1 = r1_penalty(&x, |x| x.mul(&wv).sum_axis(3).sum_axis(2).sum_axis(1).reshape(&[2, 1]));
        assert!((r1.value - w.sq_norm()).abs() < 1e-12);
        let constant = r1_penalty(&x, |x| x.mul(&Var::constant(Array::zeros(&[1, 4, 3, 3]))).sum_axis(3).sum_axis(2).sum_axis(1).reshape(&[2, 1]));
        assert_eq!(constant.value, 0.0);
    }

    #[test]
    fn r1_param_gradient_matches_finite_differences() {
        use crate::model::{discriminate_var, RefinerConfig, RefinerState};
        use crate::params::Bound;
        use nz_autograd::gradcheck::{numeric_gradient, relative_error};
        let cfg = RefinerConfig::for_size(8, 4, 8).unwrap();
        let disc = RefinerState::new(cfg, 3).unwrap().discriminator;
        let x = nz_autograd::gradcheck::random_array(&[2, 4, 8, 8], 4).map(|v| 0.5 + 0.4 * v);
        let r1 = r1_penalty(&x, |v| discriminate_var(&Bound::new(&disc, false), &cfg, v).unwrap());
        let g = r1_param_gradient(&x, &r1, |xx| {
            let b = Bound::new(&disc, true);
            let l = discriminate_var(&b, &cfg, &Var::constant(xx.clone())).unwrap();
            b.grads(&l.sum().backward(), "disc.")
        });
        for name in ["disc.in.w", "disc.in.b", "disc.fc.w"] {
            let fd = numeric_gradient(disc.get(name).unwrap(), 1e-6, |p| {
                let mut q = disc.clone();
                *q.get_mut(name).unwrap() = p.clone();
                r1_penalty(&x, |v| discriminate_var(&Bound::new(&q, false), &cfg, v).unwrap()).value
            });
            assert!(relative_error(g.get(name).unwrap(), &fd) < 1e-4, "{name}");
        }
    }
}
