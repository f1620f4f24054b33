//! Training loop: cyclic self-supervision, then adversarial rollouts with
//! progressive length growth.

use std::collections::BTreeMap;

use nz_autograd::{Array, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::image::{RgbdImage, RgbdVar};
use crate::losses::{
    discriminator_adv_loss, generator_adv_loss, r1_param_gradient, r1_penalty, reconstruction_loss, LossWeights,
    PyramidFeatures,
};
use crate::model::{discriminate_var, refine_var, sample_noise, RefinerConfig, RefinerState};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::{Bound, Params};
use crate::renderer::{cycle_warp, warp_var, SplatConfig, WarpedVar};
use crate::sky::{sky_mask, SkyMaskConfig};
use crate::trajectory::{
    autopilot_step, sample_trajectory_length, sample_virtual_pose, AutoPilotConfig, PoseSamplerConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub pretrain_steps: u64,
    pub grow_interval: u64,
    pub t_max: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 2000,
            grow_interval: 250,
            t_max: 10,
            batch_size: 4,
            total_steps: 4000,
            clip_norm: 10.0,
            ema_decay: 0.999,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.grow_interval < 1 || self.t_max < 1 || self.batch_size < 1 {
            return Err(Error::Config("grow_interval, t_max and batch_size must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("clip_norm must be > 0 and ema_decay in [0, 1)".into()));
        }
        Ok(())
    }
}

/// 0 during pretraining, then `1 + ⌊(step − pretrain) / grow⌋` capped at `t_max`.
pub fn current_t_max(step: u64, s: &Schedule) -> usize {
    if step < s.pretrain_steps {
        return 0;
    }
    let grown = (step - s.pretrain_steps) / s.grow_interval.max(1);
    (1 + grown).min(s.t_max as u64) as usize
}

/// Everything a training run needs besides the model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub splat: SplatConfig,
    pub poses: PoseSamplerConfig,
    pub autopilot: AutoPilotConfig,
    pub sky_mask: SkyMaskConfig,
    /// Focal length as a multiple of the image size.
    pub focal_scale: f64,
    pub pyramid_levels: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            splat: SplatConfig::default(),
            poses: PoseSamplerConfig::default(),
            autopilot: AutoPilotConfig::default(),
            sky_mask: SkyMaskConfig::default(),
            focal_scale: 1.0,
            pyramid_levels: 3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.splat.validate()?;
        self.poses.validate()?;
        self.autopilot.validate()?;
        self.sky_mask.validate()?;
        if !(self.focal_scale > 0.0) || self.pyramid_levels < 1 {
            return Err(Error::Config("focal_scale must be > 0 and pyramid_levels >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Cyclic,
    Trajectory,
    /// A scheduled iteration that ran one cyclic and one trajectory update.
    CyclicTrajectory,
}

/// One discriminator update's pairing: the fake came from the trajectory
/// started at dataset item `fake_source`; the real sample is item `real`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscPair {
    pub fake_source: usize,
    pub real: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub kind: StepKind,
    pub t_max_current: usize,
    /// Longest rollout in the batch; 0 for cyclic updates.
    #[serde(rename = "sampled_T")]
    pub sampled_t: usize,
    pub sampled_lengths: Vec<usize>,
    pub losses: BTreeMap<String, f64>,
    pub grad_norms: BTreeMap<String, f64>,
    pub r1_applied: bool,
    pub disc_pairs: Vec<DiscPair>,
}

impl TrainStepReport {
    /// Fold a cyclic and a trajectory report of the same step into one.
    pub fn merge(cyclic: TrainStepReport, traj: TrainStepReport) -> TrainStepReport {
        fn prefixed(m: BTreeMap<String, f64>, p: &str) -> impl Iterator<Item = (String, f64)> + '_ {
            m.into_iter().map(move |(k, v)| (format!("{p}.{k}"), v))
        }
        let mut losses: BTreeMap<_, _> = prefixed(cyclic.losses, "cyclic").collect();
        losses.extend(prefixed(traj.losses, "trajectory"));
        let mut grad_norms: BTreeMap<_, _> = prefixed(cyclic.grad_norms, "cyclic").collect();
        grad_norms.extend(prefixed(traj.grad_norms, "trajectory"));
        TrainStepReport {
            step: cyclic.step,
            kind: StepKind::CyclicTrajectory,
            t_max_current: traj.t_max_current,
            sampled_t: traj.sampled_t,
            sampled_lengths: traj.sampled_lengths,
            losses,
            grad_norms,
            r1_applied: cyclic.r1_applied || traj.r1_applied,
            disc_pairs: traj.disc_pairs,
        }
    }

    /// Reconstruction loss of the cyclic update, whichever kind of report.
    pub fn cyclic_rec(&self) -> Option<f64> {
        self.losses.get("rec").or_else(|| self.losses.get("cyclic.rec")).copied()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Deterministic generator for (seed, step, purpose); resuming at a step
/// replays the same draws without storing generator state.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

const RNG_BATCH: u64 = 1;
const RNG_CYCLIC: u64 = 2;
const RNG_TRAJECTORY: u64 = 3;

/// Owner of the model, optimizers and configuration during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub state: RefinerState,
    pub opt_refiner: Adam,
    pub opt_disc: Adam,
    features: PyramidFeatures,
    k: Intrinsics,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig, model: RefinerConfig) -> Result<Self> {
        let state = RefinerState::new(model, cfg.seed)?;
        let opt_refiner = Adam::new(cfg.adam, &state.refiner);
        let opt_disc = Adam::new(cfg.adam, &state.discriminator);
        Self::from_parts(cfg, state, opt_refiner, opt_disc)
    }

    pub fn from_parts(cfg: TrainingConfig, state: RefinerState, opt_refiner: Adam, opt_disc: Adam) -> Result<Self> {
        cfg.validate()?;
        state.validate()?;
        opt_refiner.m.ensure_same_layout(&state.refiner, "refiner optimizer")?;
        opt_disc.m.ensure_same_layout(&state.discriminator, "discriminator optimizer")?;
        let k = Intrinsics::square(state.config.image_size, cfg.focal_scale);
        Ok(Self {
            features: PyramidFeatures {
                levels: cfg.pyramid_levels,
            },
            k,
            cfg,
            state,
            opt_refiner,
            opt_disc,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn current_t_max(&self) -> usize {
        current_t_max(self.state.step, &self.cfg.schedule)
    }

    /// Dataset indices for the current step, drawn with replacement.
    pub fn batch_indices(&self, dataset_len: usize) -> Vec<usize> {
        let mut rng = step_rng(self.cfg.seed, self.state.step, RNG_BATCH);
        (0..self.cfg.schedule.batch_size).map(|_| rng.random_range(0..dataset_len)).collect()
    }

    fn check_batch(&self, batch: &[RgbdImage], ids: &[usize]) -> Result<()> {
        if batch.is_empty() || batch.len() != ids.len() {
            return Err(Error::Config("batch must be non-empty and match its index list".into()));
        }
        let s = self.state.config.image_size;
        for img in batch {
            img.ensure_shape(s, s)?;
        }
        Ok(())
    }

    fn noise<R: Rng>(&self, rng: &mut R) -> Result<Var> {
        let l = self.state.config.latent_dim;
        let a = Array::from_vec(&[1, l], sample_noise(l, rng)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Var::constant(a))
    }

    /// Cycle-warp `target` through a fresh virtual pose and refine it.
    fn cyclic_prediction<R: Rng>(&self, b: &Bound, target: &RgbdImage, rng: &mut R) -> Result<RgbdVar> {
        let pose = sample_virtual_pose(&self.cfg.poses, rng);
        let warped = cycle_warp(target, &pose, &self.k, &self.cfg.splat)?;
        let noise = self.noise(rng)?;
        refine_var(b, &self.state.config, &WarpedVar::constant(&warped), &noise)
    }

    /// Self-supervised cyclic update on real images.
    pub fn cyclic_step(&mut self, batch: &[RgbdImage], ids: &[usize]) -> Result<TrainStepReport> {
        self.check_batch(batch, ids)?;
        let mut rng = step_rng(self.cfg.seed, self.state.step, RNG_CYCLIC);
        let b = Bound::from_parts(&[(&self.state.refiner, true), (&self.state.discriminator, false)]);
        let n = batch.len() as f64;
        let mut rec = Var::scalar(0.0);
        let mut fakes = Vec::with_capacity(batch.len());
        for img in batch {
            let pred = self.cyclic_prediction(&b, img, &mut rng)?;
            rec = rec.add(&reconstruction_loss(&pred, &RgbdVar::constant(img), &self.features));
            fakes.push(pred.rgbd());
        }
        let rec = rec.scale(1.0 / n);
        let pairs: Vec<DiscPair> = ids.iter().map(|&i| DiscPair { fake_source: i, real: i }).collect();
        let report = self.adversarial_update(&b, rec, self.cfg.weights.lambda1_start, &fakes, batch, pairs)?;
        Ok(TrainStepReport {
            kind: StepKind::Cyclic,
            t_max_current: self.current_t_max(),
            sampled_t: 0,
            sampled_lengths: vec![0; batch.len()],
            ..report
        })
    }

    /// Adversarial rollout update. Each item runs `T ∈ {1…t_max_current}`
    /// auto-piloted render-refine steps; the final frame is the fake paired
    /// with its own start image.
    pub fn trajectory_step(&mut self, batch: &[RgbdImage], ids: &[usize], t_max_current: usize) -> Result<TrainStepReport> {
        self.check_batch(batch, ids)?;
        if t_max_current < 1 || t_max_current > self.cfg.schedule.t_max {
            return Err(Error::Trajectory(format!(
                "t_max_current {t_max_current} must lie in [1, {}]",
                self.cfg.schedule.t_max
            )));
        }
        let mut rng = step_rng(self.cfg.seed, self.state.step, RNG_TRAJECTORY);
        let b = Bound::from_parts(&[(&self.state.refiner, true), (&self.state.discriminator, false)]);
        let mut pseudo = Var::scalar(0.0);
        let mut pseudo_terms = 0usize;
        let mut fakes = Vec::with_capacity(batch.len());
        let mut lengths = Vec::with_capacity(batch.len());
        for img in batch {
            let len = sample_trajectory_length(t_max_current, &mut rng);
            let frames = self.rollout_var(std::slice::from_ref(&b), img, len, &mut rng)?;
            for frame in &frames {
                let target = frame.detach().to_image()?;
                let pred = self.cyclic_prediction(&b, &target, &mut rng)?;
                pseudo = pseudo.add(&reconstruction_loss(&pred, &RgbdVar::constant(&target), &self.features));
                pseudo_terms += 1;
            }
            fakes.push(frames.last().expect("rollout length >= 1").rgbd());
            lengths.push(len);
        }
        let pseudo = pseudo.scale(1.0 / pseudo_terms as f64);
        let pairs: Vec<DiscPair> = ids.iter().map(|&i| DiscPair { fake_source: i, real: i }).collect();
        let report = self.adversarial_update(&b, pseudo, self.cfg.weights.lambda1_traj, &fakes, batch, pairs)?;
        Ok(TrainStepReport {
            kind: StepKind::Trajectory,
            t_max_current,
            sampled_t: lengths.iter().copied().max().unwrap_or(0),
            sampled_lengths: lengths,
            ..report
        })
    }

    /// Differentiable render-refine-repeat from `start` for `len` steps.
    /// Step `t` (1-based) uses `bounds[min(t, bounds.len()) − 1]`, so callers
    /// can bind separate leaves per step to probe gradient flow.
    pub fn rollout_var<R: Rng>(&self, bounds: &[Bound], start: &RgbdImage, len: usize, rng: &mut R) -> Result<Vec<RgbdVar>> {
        let mut current = RgbdVar::constant(start);
        let mut frames = Vec::with_capacity(len);
        for t in 1..=len {
            let b = &bounds[t.min(bounds.len()) - 1];
            let value = current.detach().to_image()?;
            let pose = autopilot_step(&value, &sky_mask(&value, &self.cfg.sky_mask), &self.cfg.autopilot);
            let warped = warp_var(&current, &pose, &self.k, &self.cfg.splat)?;
            let noise = self.noise(rng)?;
            current = refine_var(b, &self.state.config, &warped, &noise)?;
            frames.push(current.clone());
        }
        Ok(frames)
    }

    /// One refiner update on `lambda · rec + adv(fakes)`, then one
    /// discriminator update on index-aligned (fake, real) pairs.
    fn adversarial_update(
        &mut self,
        b: &Bound,
        rec: Var,
        lambda: f64,
        fakes: &[Var],
        reals: &[RgbdImage],
        pairs: Vec<DiscPair>,
    ) -> Result<TrainStepReport> {
        let cfg = self.state.config;
        let step = self.state.step;
        let fake_refs: Vec<&Var> = fakes.iter().collect();
        let fake_batch = Var::concat(&fake_refs, 0);
        let g_adv = generator_adv_loss(&discriminate_var(b, &cfg, &fake_batch)?);
        let g_total = g_adv.add(&rec.scale(lambda));
        let mut losses = BTreeMap::new();
        losses.insert("rec".to_string(), rec.item());
        losses.insert("g_adv".to_string(), g_adv.item());
        losses.insert("g_total".to_string(), g_total.item());
        check_finite(&losses)?;

        let grads = g_total.backward();
        let mut g_ref = b.grads(&grads, "enc.");
        g_ref.extend(b.grads(&grads, "gen."));
        ensure_finite_grads(&g_ref, "refiner")?;

        // discriminator on detached fakes and the paired reals
        let real_arrays: Vec<Array> = reals.iter().map(RgbdImage::rgbd_array).collect();
        let real_refs: Vec<&Array> = real_arrays.iter().collect();
        let real_batch = Array::concat(&real_refs, 0);
        let bd = Bound::new(&self.state.discriminator, true);
        let fake_detached = fake_batch.detach();
        let d_adv = discriminator_adv_loss(
            &discriminate_var(&bd, &cfg, &Var::constant(real_batch.clone()))?,
            &discriminate_var(&bd, &cfg, &fake_detached)?,
        );
        losses.insert("d_adv".to_string(), d_adv.item());
        check_finite(&losses)?;
        let mut g_disc = bd.grads(&d_adv.backward(), "disc.");

        let r1_applied = self.cfg.weights.r1_due(step);
        if r1_applied {
            let disc = &self.state.discriminator;
            let frozen = Bound::new(disc, false);
            let r1 = r1_penalty(&real_batch, |x| discriminate_var(&frozen, &cfg, x).expect("checked shape"));
            losses.insert("r1".to_string(), r1.value);
            check_finite(&losses)?;
            let g_r1 = r1_param_gradient(&real_batch, &r1, |x| {
                let bp = Bound::new(disc, true);
                let logits = discriminate_var(&bp, &cfg, &Var::constant(x.clone())).expect("checked shape");
                bp.grads(&logits.sum().backward(), "disc.")
            });
            let scale = self.cfg.weights.lambda2 * self.cfg.weights.lazy_interval as f64;
            g_disc.add_scaled(&g_r1, scale);
        }
        ensure_finite_grads(&g_disc, "discriminator")?;

        let clip = self.cfg.schedule.clip_norm;
        let mut grad_norms = BTreeMap::new();
        grad_norms.insert("refiner".to_string(), clip_global_norm(&mut g_ref, clip));
        grad_norms.insert("discriminator".to_string(), clip_global_norm(&mut g_disc, clip));
        grad_norms.insert("refiner_clipped".to_string(), g_ref.sq_norm().sqrt());
        grad_norms.insert("discriminator_clipped".to_string(), g_disc.sq_norm().sqrt());

        self.opt_refiner.step(&mut self.state.refiner, &g_ref);
        self.opt_disc.step(&mut self.state.discriminator, &g_disc);
        self.state.ema_update(self.cfg.schedule.ema_decay);

        Ok(TrainStepReport {
            step,
            kind: StepKind::Cyclic,
            t_max_current: 0,
            sampled_t: 0,
            sampled_lengths: Vec::new(),
            losses,
            grad_norms,
            r1_applied,
            disc_pairs: pairs,
        })
    }

    /// One scheduled iteration: cyclic only while `current_t_max = 0`,
    /// otherwise a cyclic then a trajectory update. Advances the step counter.
    pub fn iteration(&mut self, dataset: &[RgbdImage]) -> Result<TrainStepReport> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let ids = self.batch_indices(dataset.len());
        let batch: Vec<RgbdImage> = ids.iter().map(|&i| dataset[i].clone()).collect();
        let t_max = self.current_t_max();
        let cyclic = self.cyclic_step(&batch, &ids)?;
        let report = if t_max == 0 {
            cyclic
        } else {
            let traj = self.trajectory_step(&batch, &ids, t_max)?;
            TrainStepReport::merge(cyclic, traj)
        };
        self.state.step += 1;
        Ok(report)
    }

    /// Run until `schedule.total_steps`, calling `on_step` after each step.
    pub fn train(
        &mut self,
        dataset: &[RgbdImage],
        mut on_step: impl FnMut(&Trainer, &TrainStepReport) -> Result<()>,
    ) -> Result<Vec<TrainStepReport>> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let mut log = Vec::new();
        while self.state.step < self.cfg.schedule.total_steps {
            let report = self.iteration(dataset)?;
            on_step(self, &report)?;
            log.push(report);
        }
        Ok(log)
    }
}

fn check_finite(losses: &BTreeMap<String, f64>) -> Result<()> {
    match losses.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, &value)) => Err(Error::NonFiniteLoss {
            name: name.clone(),
            value,
        }),
        None => Ok(()),
    }
}

fn ensure_finite_grads(g: &Params, what: &str) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            name: format!("{what} gradient"),
            value: f64::NAN,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::synthetic_collection;

    fn tiny() -> (TrainingConfig, RefinerConfig) {
        let cfg = TrainingConfig {
            schedule: Schedule {
                pretrain_steps: 2,
                grow_interval: 2,
                t_max: 3,
                batch_size: 2,
                total_steps: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (cfg, RefinerConfig::for_size(16, 4, 8).unwrap())
    }

    #[test]
    fn schedule_values() {
        let full = Schedule {
            pretrain_steps: 200_000,
            grow_interval: 25_000,
            t_max: 10,
            ..Default::default()
        };
        assert_eq!(current_t_max(199_999, &full), 0);
        assert_eq!(current_t_max(200_000, &full), 1);
        assert_eq!(current_t_max(250_000, &full), 3);
        assert_eq!(current_t_max(200_000 + 25_000 * 15, &full), 10);
        let desk = Schedule {
            pretrain_steps: 2000,
            grow_interval: 250,
            t_max: 6,
            ..Default::default()
        };
        assert_eq!(current_t_max(2600, &desk), 3);
    }

    #[test]
    fn training_is_deterministic_and_scheduled() {
        let (cfg, model) = tiny();
        let data = synthetic_collection(3, 16, 4).unwrap();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), model).unwrap();
            t.train(&data, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].kind, StepKind::Cyclic);
        assert_eq!(a[2].kind, StepKind::CyclicTrajectory);
        for r in &a {
            assert!(r.sampled_t <= r.t_max_current);
            assert!(r.losses.values().all(|v| v.is_finite()));
        }
        assert!(a[0].r1_applied && !a[1].r1_applied);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, model) = tiny();
        let data = synthetic_collection(3, 16, 5).unwrap();
        let mut full = Trainer::new(cfg.clone(), model).unwrap();
        let log_full = full.train(&data, |_, _| Ok(())).unwrap();
        let mut first = Trainer::new(TrainingConfig { schedule: Schedule { total_steps: 3, ..cfg.schedule }, ..cfg.clone() }, model).unwrap();
        first.train(&data, |_, _| Ok(())).unwrap();
        let mut resumed = Trainer::from_parts(cfg, first.state.clone(), first.opt_refiner.clone(), first.opt_disc.clone()).unwrap();
        let tail = resumed.train(&data, |_, _| Ok(())).unwrap();
        assert_eq!(tail, log_full[3..].to_vec());
        assert_eq!(resumed.state, full.state);
    }
}
