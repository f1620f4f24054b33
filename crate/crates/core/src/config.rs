//! Layered run configuration: built-in defaults, then a config file, then
//! `key=value` overrides.
//!
//! The file format is TOML restricted to dotted keys, one per line:
//!
//! ```toml
//! training.total_steps = 10
//! renderer.beta = 10.0
//! ```
//!
//! `[section]` tables are accepted too; both flatten to the same keys.
//! Unknown keys and values of the wrong kind are rejected, naming the key.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DepthProvider;
use crate::error::{Error, Result};
use crate::evaluation::EvaluationProtocol;
use crate::generation::GenerationConfig;
use crate::losses::LossWeights;
use crate::metrics::EmbedderHandle;
use crate::model::RefinerConfig;
use crate::optim::AdamConfig;
use crate::renderer::SplatConfig;
use crate::sky::{SkyCorrectionConfig, SkyMaskConfig};
use crate::training::{Schedule, TrainingConfig};
use crate::trajectory::{AutoPilotConfig, PoseSamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub output_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// `synthetic` for generated scenes, otherwise an image folder.
    pub source: String,
    pub image_size: usize,
    /// Number of generated scenes when `source = "synthetic"`.
    pub synthetic_count: usize,
    pub depth: String,
    pub constant_disparity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub base_channels: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub pretrain_steps: u64,
    pub grow_interval: u64,
    pub t_max: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub checkpoint_interval: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub lambda1_start: f64,
    pub lambda1_traj: f64,
    pub lambda2: f64,
    pub lazy_interval: u64,
    pub pyramid_levels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkySection {
    pub disparity_knee: f64,
    pub softness: f64,
    pub row_prior_weight: f64,
    pub sky_disparity_cap: f64,
    pub canvas_scale: f64,
    pub correction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSection {
    /// Focal length as a multiple of the image size.
    pub focal_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSection {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSection {
    pub scenes: usize,
    pub short_length: usize,
    pub long_length: usize,
    pub fid_length: usize,
    pub window: usize,
    /// `fixed-random-conv` or `external`.
    pub embedder: String,
    pub embed_dim: usize,
    pub embedding_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightSection {
    pub bind: String,
    pub max_forward: f64,
    pub max_lateral: f64,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub losses: LossSection,
    pub renderer: SplatConfig,
    pub poses: PoseSamplerConfig,
    pub autopilot: AutoPilotConfig,
    pub sky: SkySection,
    pub camera: CameraSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
    pub flight: FlightSection,
}

impl Default for Config {
    fn default() -> Self {
        let sched = Schedule::default();
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        let mask = SkyMaskConfig::default();
        let sky = SkyCorrectionConfig::default();
        let model = RefinerConfig::default();
        let eval = EvaluationProtocol::default();
        Self {
            run: RunSection {
                name: "default".into(),
                seed: 0,
                output_dir: "runs".into(),
            },
            data: DataSection {
                source: "synthetic".into(),
                image_size: model.image_size,
                synthetic_count: 64,
                depth: "synthetic".into(),
                constant_disparity: 0.5,
            },
            model: ModelSection {
                base_channels: model.base_channels,
                latent_dim: model.latent_dim,
                mapping_layers: model.mapping_layers,
            },
            training: TrainingSection {
                pretrain_steps: sched.pretrain_steps,
                grow_interval: sched.grow_interval,
                t_max: sched.t_max,
                batch_size: sched.batch_size,
                total_steps: sched.total_steps,
                clip_norm: sched.clip_norm,
                ema_decay: sched.ema_decay,
                checkpoint_interval: 500,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
            },
            losses: LossSection {
                lambda1_start: w.lambda1_start,
                lambda1_traj: w.lambda1_traj,
                lambda2: w.lambda2,
                lazy_interval: w.lazy_interval,
                pyramid_levels: 3,
            },
            renderer: SplatConfig::default(),
            poses: PoseSamplerConfig::default(),
            autopilot: AutoPilotConfig::default(),
            sky: SkySection {
                disparity_knee: mask.disparity_knee,
                softness: mask.softness,
                row_prior_weight: mask.row_prior_weight,
                sky_disparity_cap: sky.sky_disparity_cap,
                canvas_scale: sky.canvas_scale,
                correction: true,
            },
            camera: CameraSection { focal_scale: 1.0 },
            generate: GenerateSection { steps: 100 },
            evaluate: EvaluateSection {
                scenes: 8,
                short_length: eval.short_length,
                long_length: eval.long_length,
                fid_length: eval.fid_length,
                window: eval.window,
                embedder: "fixed-random-conv".into(),
                embed_dim: crate::metrics::DEFAULT_EMBED_DIM,
                embedding_file: String::new(),
            },
            flight: FlightSection {
                bind: "127.0.0.1:8080".into(),
                max_forward: 0.2,
                max_lateral: 0.1,
                max_yaw_deg: 10.0,
                max_pitch_deg: 10.0,
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = serde_json::Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Default::default()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn same_kind(default: &Value, new: &Value) -> bool {
    match (default, new) {
        (Value::Number(d), Value::Number(n)) => d.is_f64() || n.is_u64() || (n.is_i64() && d.is_i64()),
        (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_)) => true,
        (Value::Array(d), Value::Array(n)) => d.len() == n.len() && d.iter().zip(n).all(|(a, b)| same_kind(a, b)),
        _ => false,
    }
}

/// Parse the right-hand side of an override as a TOML value; bare words
/// become strings.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"]).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl Config {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    fn apply(&mut self, updates: BTreeMap<String, Value>) -> Result<()> {
        let mut flat = self.flat();
        for (key, v) in updates {
            let Some(default) = flat.get(&key) else {
                return Err(Error::UnknownConfigKey(key));
            };
            // integers are accepted where reals are expected
            let v = match (default, &v) {
                (Value::Number(d), Value::Number(n)) if d.is_f64() && !n.is_f64() => {
                    serde_json::json!(n.as_f64().unwrap_or_default())
                }
                _ => v,
            };
            if !same_kind(default, &v) {
                return Err(Error::Config(format!("`{key}` expects a value like {default}, got {v}")));
            }
            flat.insert(key, v);
        }
        *self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Merge a config file's contents.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut updates = BTreeMap::new();
        flatten("", &serde_json::to_value(&table)?, &mut updates);
        self.apply(updates)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.merge_toml(&text)
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut updates = BTreeMap::new();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            updates.insert(k.trim().to_string(), parse_value(v));
        }
        self.apply(updates)
    }

    /// Defaults, then an optional file, then overrides; validated.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.merge_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key = value` line per setting, in key order.
    pub fn to_flat_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let tv: toml::Value = serde_json::from_value(v).expect("config values are TOML-representable");
            s.push_str(&format!("{k} = {tv}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.refiner_config()?;
        self.training_config().validate()?;
        self.generation_config().validate()?;
        self.evaluation_protocol().validate()?;
        self.depth_provider()?;
        let f = &self.flight;
        if ![f.max_forward, f.max_lateral, f.max_yaw_deg, f.max_pitch_deg].iter().all(|b| *b >= 0.0 && b.is_finite()) {
            return Err(Error::Config("flight bounds must be finite and >= 0".into()));
        }
        if self.training.checkpoint_interval < 1 {
            return Err(Error::Config("training.checkpoint_interval must be >= 1".into()));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config("run.name must be a non-empty plain name".into()));
        }
        match self.evaluate.embedder.as_str() {
            "fixed-random-conv" | "external" => Ok(()),
            other => Err(Error::Config(format!("unknown embedder `{other}`"))),
        }
    }

    pub fn refiner_config(&self) -> Result<RefinerConfig> {
        let mut c = RefinerConfig::for_size(self.data.image_size, self.model.base_channels, self.model.latent_dim)?;
        c.mapping_layers = self.model.mapping_layers;
        Ok(c)
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            schedule: Schedule {
                pretrain_steps: t.pretrain_steps,
                grow_interval: t.grow_interval,
                t_max: t.t_max,
                batch_size: t.batch_size,
                total_steps: t.total_steps,
                clip_norm: t.clip_norm,
                ema_decay: t.ema_decay,
            },
            weights: LossWeights {
                lambda1_start: self.losses.lambda1_start,
                lambda1_traj: self.losses.lambda1_traj,
                lambda2: self.losses.lambda2,
                lazy_interval: self.losses.lazy_interval,
            },
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                ..AdamConfig::default()
            },
            splat: self.renderer,
            poses: self.poses,
            autopilot: self.autopilot,
            sky_mask: self.sky_mask(),
            focal_scale: self.camera.focal_scale,
            pyramid_levels: self.losses.pyramid_levels,
            seed: self.run.seed,
        }
    }

    pub fn sky_mask(&self) -> SkyMaskConfig {
        SkyMaskConfig {
            disparity_knee: self.sky.disparity_knee,
            softness: self.sky.softness,
            row_prior_weight: self.sky.row_prior_weight,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            splat: self.renderer,
            autopilot: self.autopilot,
            sky_mask: self.sky_mask(),
            sky: SkyCorrectionConfig {
                sky_disparity_cap: self.sky.sky_disparity_cap,
                canvas_scale: self.sky.canvas_scale,
            },
            sky_correction: self.sky.correction,
            focal_scale: self.camera.focal_scale,
        }
    }

    pub fn evaluation_protocol(&self) -> EvaluationProtocol {
        let e = &self.evaluate;
        EvaluationProtocol {
            short_length: e.short_length,
            long_length: e.long_length,
            fid_length: e.fid_length,
            window: e.window,
            embedder: if e.embedder == "external" {
                EmbedderHandle::External {
                    path: e.embedding_file.clone().into(),
                }
            } else {
                EmbedderHandle::FixedRandomConv {
                    dim: e.embed_dim,
                    seed: self.run.seed,
                }
            },
            pyramid_levels: self.losses.pyramid_levels,
            seed: self.run.seed,
        }
    }

    pub fn depth_provider(&self) -> Result<DepthProvider> {
        DepthProvider::parse(&self.data.depth, self.data.constant_disparity)
    }

    pub fn is_synthetic(&self) -> bool {
        self.data.source == "synthetic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_round_trip() {
        let mut c = Config::default();
        c.merge_toml("training.total_steps = 10\n[renderer]\nbeta = 3\n").unwrap();
        c.apply_overrides(&["run.name=smoke", "poses.max_translation=[0.1, 0.1, 0.2]", "sky.correction=false"])
            .unwrap();
        assert_eq!(c.training.total_steps, 10);
        assert_eq!(c.renderer.beta, 3.0);
        assert_eq!(c.run.name, "smoke");
        assert_eq!(c.poses.max_translation, [0.1, 0.1, 0.2]);
        assert!(!c.sky.correction);
        let mut again = Config::default();
        again.merge_toml(&c.to_flat_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys() {
        let mut c = Config::default();
        match c.apply_overrides(&["training.totl_steps=3"]) {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "training.totl_steps"),
            other => panic!("{other:?}"),
        }
        let err = c.apply_overrides(&["training.total_steps=fast"]).unwrap_err().to_string();
        assert!(err.contains("training.total_steps"), "{err}");
        assert!(c.apply_overrides(&["training.total_steps=-1"]).is_err());
        assert!(matches!(c.merge_toml("bogus = 1"), Err(Error::UnknownConfigKey(_))));
        assert!(Config::resolve(None, &["data.image_size=48"]).is_err());
    }
}
