//! Evaluation protocol: short-range synthesis against ground truth and
//! long-range generation statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{rollout_autopilot, rollout_plan, GenerationConfig};
use crate::geometry::{CameraPose, Intrinsics, Vec3};
use crate::image::RgbdImage;
use crate::losses::PyramidFeatures;
use crate::metrics::{
    fid_from_embeddings, fid_sliding_from_embeddings, kid_from_embeddings, perceptual, psnr, ssim,
    style_consistency, EmbedderHandle, EvaluationReport,
};
use crate::model::RefinerState;
use crate::renderer::cycle_warp;
use crate::synthetic::SyntheticScene;
use crate::trajectory::{sample_virtual_pose, PoseSamplerConfig, Provenance, TrajectoryPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationProtocol {
    /// Trajectory length for short-range synthesis.
    pub short_length: usize,
    /// Auto-pilot rollout length for the style metric.
    pub long_length: usize,
    /// Frames per rollout pooled into FID and KID.
    pub fid_length: usize,
    pub window: usize,
    pub embedder: EmbedderHandle,
    pub pyramid_levels: usize,
    pub seed: u64,
}

impl Default for EvaluationProtocol {
    fn default() -> Self {
        Self {
            short_length: 5,
            long_length: 50,
            fid_length: 50,
            window: 20,
            embedder: EmbedderHandle::default(),
            pyramid_levels: 3,
            seed: 0,
        }
    }
}

impl EvaluationProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.short_length < 1 || self.long_length < 1 || self.fid_length < 1 || self.pyramid_levels < 1 {
            return Err(Error::Config("evaluation lengths and pyramid_levels must be >= 1".into()));
        }
        if self.window < 1 || self.window > self.long_length.max(self.fid_length) {
            return Err(Error::SequenceTooShort {
                len: self.long_length.max(self.fid_length),
                window: self.window,
            });
        }
        Ok(())
    }
}

/// Evaluation inputs: synthetic scenes (with ground truth for any pose) or
/// plain images.
pub enum EvalSource<'a> {
    Synthetic(&'a [(SyntheticScene, CameraPose)]),
    Images(&'a [RgbdImage]),
}

/// Forward steps with small random heading changes.
pub fn short_range_plan(length: usize, forward: f64, rng: &mut impl Rng) -> Result<TrajectoryPlan> {
    let steps = (0..length)
        .map(|_| {
            let yaw = rng.random_range(-2.0..2.0);
            CameraPose::from_euler_deg(yaw, 0.0, 0.0, Vec3::new(0.0, 0.0, forward))
        })
        .collect();
    TrajectoryPlan::new(steps, vec![Provenance::User; length])
}

#[derive(Default)]
struct Pairwise {
    psnr: f64,
    ssim: f64,
    perceptual: f64,
    n: usize,
}

impl Pairwise {
    fn add(&mut self, pred: &RgbdImage, target: &RgbdImage, f: &PyramidFeatures) -> Result<()> {
        self.psnr += psnr(pred, target)?;
        self.ssim += ssim(pred, target)?;
        self.perceptual += perceptual(pred, target, f)?;
        self.n += 1;
        Ok(())
    }
}

pub fn evaluate(
    model: &RefinerState,
    source: EvalSource<'_>,
    protocol: &EvaluationProtocol,
    gen: &GenerationConfig,
    config_echo: serde_json::Value,
) -> Result<EvaluationReport> {
    protocol.validate()?;
    let size = model.config.image_size;
    let k = Intrinsics::square(size, gen.focal_scale);
    let features = PyramidFeatures {
        levels: protocol.pyramid_levels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut pair = Pairwise::default();

    let starts: Vec<RgbdImage> = match &source {
        EvalSource::Synthetic(views) => views.iter().map(|(s, p)| s.render(p, &k)).collect(),
        EvalSource::Images(imgs) => imgs.to_vec(),
    };
    if starts.len() < 2 {
        return Err(Error::Metric(format!("evaluation needs at least 2 start images, got {}", starts.len())));
    }

    // short range
    match &source {
        EvalSource::Synthetic(views) => {
            for (i, (scene, pose0)) in views.iter().enumerate() {
                let plan = short_range_plan(protocol.short_length, gen.autopilot.forward_speed, &mut rng)?;
                let out = rollout_plan(model, &starts[i], &plan, gen, protocol.seed ^ i as u64)?;
                for (frame, cum) in out.frames.iter().zip(plan.cumulative()) {
                    pair.add(frame, &scene.render(&pose0.compose(&cum), &k), &features)?;
                }
            }
        }
        EvalSource::Images(imgs) => {
            // no ground truth: score the cyclic round trip against the input
            let poses = PoseSamplerConfig::default();
            for img in imgs.iter() {
                for _ in 0..protocol.short_length {
                    let warped = cycle_warp(img, &sample_virtual_pose(&poses, &mut rng), &k, &gen.splat)?;
                    let noise = crate::model::sample_noise(model.config.latent_dim, &mut rng);
                    pair.add(&model.refine(&warped, &noise, true)?, img, &features)?;
                }
            }
        }
    }

    // long range
    let length = protocol.long_length.max(protocol.fid_length);
    let embedder = protocol.embedder.build()?;
    let mut real = Vec::with_capacity(starts.len());
    let mut sequences = Vec::with_capacity(starts.len());
    let mut style = 0.0;
    for (i, start) in starts.iter().enumerate() {
        let out = rollout_autopilot(model, start, length, gen, protocol.seed.wrapping_add(1000 + i as u64))?;
        style += style_consistency(start, &out.frames[..protocol.long_length], &features)?;
        real.push(embedder.embed(start)?);
        sequences.push(embedder.embed_all(&out.frames)?);
    }
    let fake: Vec<Vec<f64>> = sequences.iter().flat_map(|s| s[..protocol.fid_length].iter().cloned()).collect();
    let n = pair.n.max(1) as f64;
    Ok(EvaluationReport {
        psnr: pair.psnr / n,
        ssim: pair.ssim / n,
        perceptual: pair.perceptual / n,
        fid: fid_from_embeddings(&real, &fake)?,
        fid_sw: fid_sliding_from_embeddings(&real, &sequences, protocol.window)?,
        kid: kid_from_embeddings(&real, &fake)?,
        style: style / starts.len() as f64,
        config: config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RefinerConfig;
    use crate::synthetic::synthetic_views;

    #[test]
    fn report_has_every_field() {
        let model = RefinerState::new(RefinerConfig::for_size(16, 4, 8).unwrap(), 0).unwrap();
        let views = synthetic_views(2, 16, 1);
        let protocol = EvaluationProtocol {
            short_length: 2,
            long_length: 4,
            fid_length: 4,
            window: 2,
            embedder: EmbedderHandle::FixedRandomConv { dim: 16, seed: 0 },
            ..Default::default()
        };
        let r = evaluate(&model, EvalSource::Synthetic(&views), &protocol, &GenerationConfig::default(), serde_json::json!({})).unwrap();
        assert_eq!(r.fid_sw.len(), 3);
        let v = serde_json::to_value(&r).unwrap();
        for f in EvaluationReport::FIELDS {
            assert!(v.get(f).is_some(), "{f}");
        }
        assert!(r.psnr > 0.0 && r.ssim <= 1.0 && r.fid >= 0.0 && r.style >= 0.0);
    }
}
