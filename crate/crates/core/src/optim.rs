//! Adam and global-norm gradient clipping over named parameter sets.

use serde::{Deserialize, Serialize};

use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use nz_autograd::Array;

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Params::new();
        g.insert("a", Array::full(&[10], 3.0));
        g.insert("b", Array::full(&[5], -4.0));
        let before = clip_global_norm(&mut g, 10.0);
        assert!(before > 10.0);
        assert!(g.sq_norm().sqrt() <= 10.0 + 1e-6);
        let mut small = Params::new();
        small.insert("a", Array::full(&[2], 0.1));
        let copy = small.clone();
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Params::new();
        p.insert("x", Array::full(&[3], 2.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..500 {
            let mut g = Params::new();
            g.insert("x", p.get("x").unwrap().map(|v| 2.0 * v));
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").unwrap().max_abs() < 0.1);
    }
}
