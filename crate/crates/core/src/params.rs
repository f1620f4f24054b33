//! Named parameter arrays and their binding into autodiff graphs.

use std::collections::BTreeMap;

use nz_autograd::{Array, Gradients, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Ordered map from parameter name to value. Ordering is by name, so
/// iteration (and anything serialized from it) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Array>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect(),
        }
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn ensure_same_layout(&self, other: &Params, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{what}: parameter names or shapes differ")))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Array::all_finite)
    }

    pub fn sq_norm(&self) -> f64 {
        self.map.values().map(Array::sq_norm).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.scale_in_place(s);
        }
    }

    /// `self += s · other` over matching names.
    pub fn add_scaled(&mut self, other: &Params, s: f64) {
        for (k, v) in self.map.iter_mut() {
            if let Some(o) = other.map.get(k) {
                for (a, b) in v.data_mut().iter_mut().zip(o.data()) {
                    *a += s * b;
                }
            }
        }
    }

    /// Merge disjoint parameter sets.
    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    pub fn init_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Array::from_vec(shape, data).expect("init shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Array::full(shape, value));
    }
}

/// Parameters bound to graph leaves for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Trainable leaves record gradients; frozen ones are constants.
    pub fn new(params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { Var::param(v.clone()) } else { Var::constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    /// Bind several sets with their own trainability.
    pub fn from_parts(parts: &[(&Params, bool)]) -> Self {
        let mut vars = BTreeMap::new();
        for (p, trainable) in parts {
            vars.extend(Self::new(p, *trainable).vars);
        }
        Self { vars }
    }

    /// Panics on an unknown name: layer code and initialization share names,
    /// so a miss is a programming error.
    pub fn v(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Gradients for every bound name with the given prefix (zeros where no
    /// gradient reached).
    pub fn grads(&self, g: &Gradients, prefix: &str) -> Params {
        let mut out = Params::new();
        for (k, v) in &self.vars {
            if k.starts_with(prefix) {
                out.insert(k.clone(), g.get_or_zeros(v));
            }
        }
        out
    }
}
