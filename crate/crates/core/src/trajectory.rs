//! Virtual camera sampling: small random poses for cyclic supervision, the
//! auto-pilot policy for long flights, and the serialized trajectory plan.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Vec3};
use crate::image::{Grid, RgbdImage};

/// Per-axis bounds for uniformly sampled virtual poses. Rotation bounds are
/// ordered as rotations about `x` (pitch), `y` (yaw) and `z` (roll).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSamplerConfig {
    pub max_translation: [f64; 3],
    pub max_rotation_deg: [f64; 3],
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        Self {
            max_translation: [0.05, 0.05, 0.1],
            max_rotation_deg: [2.0, 2.0, 1.0],
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .max_translation
            .iter()
            .chain(&self.max_rotation_deg)
            .all(|b| b.is_finite() && *b >= 0.0);
        if !ok {
            return Err(Error::Config("pose sampler bounds must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Draw each translation and rotation component uniformly in `[-b, b]`.
pub fn sample_virtual_pose<R: Rng + ?Sized>(cfg: &PoseSamplerConfig, rng: &mut R) -> CameraPose {
    let t = Vec3::new(
        symmetric(rng, cfg.max_translation[0]),
        symmetric(rng, cfg.max_translation[1]),
        symmetric(rng, cfg.max_translation[2]),
    );
    let pitch = symmetric(rng, cfg.max_rotation_deg[0]);
    let yaw = symmetric(rng, cfg.max_rotation_deg[1]);
    let roll = symmetric(rng, cfg.max_rotation_deg[2]);
    CameraPose::from_euler_deg(yaw, pitch, roll, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoPilotConfig {
    pub forward_speed: f64,
    /// Desired fraction of the frame covered by sky; the camera climbs when
    /// it sees less and descends when it sees more.
    pub sky_fraction_target: f64,
    pub near_threshold: f64,
    /// Degrees of yaw per unit difference in left/right near fraction.
    pub turn_gain: f64,
    /// Degrees of pitch per unit (normalized-row) error of the sky centroid.
    pub pitch_gain: f64,
    /// Target row of the sky centroid, as a fraction of image height.
    pub horizon_row_target: f64,
    /// Vertical translation per unit sky-fraction error, relative to forward
    /// travel.
    pub lift_gain: f64,
    pub max_angle_deg: f64,
}

impl Default for AutoPilotConfig {
    fn default() -> Self {
        // A frame whose top 40% is sky has its sky centroid at row 0.2, so the
        // two targets agree and such a frame flies straight.
        Self {
            forward_speed: 0.05,
            sky_fraction_target: 0.4,
            near_threshold: 0.35,
            turn_gain: 20.0,
            pitch_gain: 15.0,
            horizon_row_target: 0.2,
            lift_gain: 0.5,
            max_angle_deg: 5.0,
        }
    }
}

impl AutoPilotConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("autopilot: {m}")));
        if !(self.forward_speed > 0.0 && self.forward_speed.is_finite()) {
            return bad("forward_speed must be > 0");
        }
        if !(self.near_threshold > 0.0 && self.near_threshold < 1.0) {
            return bad("near_threshold must lie in (0, 1)");
        }
        if !(self.sky_fraction_target > 0.0 && self.sky_fraction_target < 1.0) {
            return bad("sky_fraction_target must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.horizon_row_target) {
            return bad("horizon_row_target must lie in [0, 1]");
        }
        if ![self.turn_gain, self.pitch_gain, self.lift_gain].iter().all(|g| g.is_finite())
            || !(self.max_angle_deg >= 0.0 && self.max_angle_deg <= 45.0)
        {
            return bad("gains must be finite and max_angle_deg in [0, 45]");
        }
        Ok(())
    }
}

/// Scene statistics the auto-pilot steers on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneStats {
    pub near_left: f64,
    pub near_right: f64,
    /// Mass-weighted sky row centroid in `[0, 1]`; 0 when there is no sky.
    pub sky_centroid_row: f64,
    pub sky_fraction: f64,
}

pub fn scene_stats(current: &RgbdImage, sky_mask: &Grid, near_threshold: f64) -> SceneStats {
    let (w, h) = (current.width, current.height);
    let half = w as f64 / 2.0;
    let (mut left, mut right, mut nl, mut nr) = (0.0, 0.0, 0.0, 0.0);
    let (mut mass, mut row_mass) = (0.0, 0.0);
    for y in 0..h {
        let row = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let i = y * w + x;
            let near = (current.validity[i] > 0.0 && current.disparity[i] > near_threshold) as u8 as f64;
            // share of the pixel's extent [x, x+1) left of the midline
            let lw = (half - x as f64).clamp(0.0, 1.0);
            left += lw * near;
            nl += lw;
            right += (1.0 - lw) * near;
            nr += 1.0 - lw;
            let s = sky_mask.data[i];
            mass += s;
            row_mass += s * row;
        }
    }
    let n = (w * h) as f64;
    SceneStats {
        near_left: if nl > 0.0 { left / nl } else { 0.0 },
        near_right: if nr > 0.0 { right / nr } else { 0.0 },
        sky_centroid_row: if mass > 1e-9 { row_mass / mass } else { 0.0 },
        sky_fraction: mass / n,
    }
}

/// One auto-pilot decision: yaw away from the side with more near content,
/// pitch so the sky centroid moves toward `horizon_row_target`, and translate
/// `forward_speed` along the new heading, tilted up or down to restore the
/// target sky fraction.
pub fn autopilot_step(current: &RgbdImage, sky_mask: &Grid, cfg: &AutoPilotConfig) -> CameraPose {
    let st = scene_stats(current, sky_mask, cfg.near_threshold);
    let lim = cfg.max_angle_deg;
    let yaw = (cfg.turn_gain * (st.near_left - st.near_right)).clamp(-lim, lim);
    let pitch = (cfg.pitch_gain * (cfg.horizon_row_target - st.sky_centroid_row)).clamp(-lim, lim);
    let lift = cfg.lift_gain * (cfg.sky_fraction_target - st.sky_fraction);
    let rot = CameraPose::from_euler_deg(yaw, pitch, 0.0, Vec3::zeros()).rotation;
    // -y is up in camera coordinates
    let heading = rot * Vec3::new(0.0, -lift, 1.0).normalize();
    CameraPose {
        rotation: rot,
        translation: heading * cfg.forward_speed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cyclic,
    Autopilot,
    User,
}

/// Ordered relative poses (step `t-1 → t`) with provenance tags.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPlan {
    pub steps: Vec<CameraPose>,
    pub provenance: Vec<Provenance>,
}

pub const TRAJECTORY_SCHEMA: &str = "nz-trajectory/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryDoc {
    schema: String,
    poses: Vec<[[f64; 4]; 4]>,
    provenance: Vec<Provenance>,
}

impl TrajectoryPlan {
    pub fn new(steps: Vec<CameraPose>, provenance: Vec<Provenance>) -> Result<Self> {
        let plan = Self { steps, provenance };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Trajectory("plan must contain at least one step".into()));
        }
        if self.steps.len() != self.provenance.len() {
            return Err(Error::Trajectory(format!(
                "{} poses but {} provenance tags",
                self.steps.len(),
                self.provenance.len()
            )));
        }
        for (i, p) in self.steps.iter().enumerate() {
            p.validate().map_err(|e| Error::Trajectory(format!("step {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Cumulative poses `P_t = P_{t-1} ∘ step_t`, starting from identity.
    pub fn cumulative(&self) -> Vec<CameraPose> {
        let mut acc = CameraPose::identity();
        self.steps
            .iter()
            .map(|s| {
                acc = acc.compose(s);
                acc
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TrajectoryDoc {
            schema: TRAJECTORY_SCHEMA.into(),
            poses: self.steps.iter().map(CameraPose::to_matrix).collect(),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TrajectoryDoc =
            serde_json::from_str(s).map_err(|e| Error::Trajectory(format!("malformed document: {e}")))?;
        if doc.schema != TRAJECTORY_SCHEMA {
            return Err(Error::Trajectory(format!(
                "unsupported schema `{}` (expected `{TRAJECTORY_SCHEMA}`)",
                doc.schema
            )));
        }
        let steps = doc
            .poses
            .iter()
            .enumerate()
            .map(|(i, m)| CameraPose::from_matrix(m).map_err(|e| Error::Trajectory(format!("pose {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps, doc.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Length uniform in `{1, …, t_max_current}`.
pub fn sample_trajectory_length<R: Rng + ?Sized>(t_max_current: usize, rng: &mut R) -> usize {
    rng.random_range(1..=t_max_current.max(1))
}

/// A training trajectory of random length. Its poses are provisional
/// straight-ahead steps: the rollout replaces each with the auto-pilot's
/// decision on the frame it actually reaches.
pub fn sample_training_trajectory<R: Rng + ?Sized>(
    t_max_current: usize,
    t_max: usize,
    forward_speed: f64,
    rng: &mut R,
) -> Result<TrajectoryPlan> {
    if t_max_current < 1 || t_max_current > t_max {
        return Err(Error::Trajectory(format!(
            "t_max_current {t_max_current} must lie in [1, {t_max}]"
        )));
    }
    let len = sample_trajectory_length(t_max_current, rng);
    TrajectoryPlan::new(
        vec![CameraPose::translation(0.0, 0.0, forward_speed); len],
        vec![Provenance::Autopilot; len],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_bounds_give_identity() {
        let cfg = PoseSamplerConfig {
            max_translation: [0.0; 3],
            max_rotation_deg: [0.0; 3],
        };
        let p = sample_virtual_pose(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.distance(&CameraPose::identity()) < 1e-15);
    }

    #[test]
    fn uniform_translation_statistics() {
        let cfg = PoseSamplerConfig {
            max_translation: [0.1; 3],
            max_rotation_deg: [2.0, 2.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut sum = Vec3::zeros();
        for _ in 0..n {
            let p = sample_virtual_pose(&cfg, &mut rng);
            assert!(p.translation.iter().all(|c| c.abs() <= 0.1));
            p.validate().unwrap();
            sum += p.translation;
        }
        // sigma of the mean of U(-b, b) is b / sqrt(3 n)
        let sigma = 0.1 / (3.0 * n as f64).sqrt();
        for c in (sum / n as f64).iter() {
            assert!(c.abs() < 3.0 * sigma, "mean {c}");
        }
    }

    #[test]
    fn determinism() {
        let cfg = PoseSamplerConfig::default();
        let a = sample_virtual_pose(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_virtual_pose(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn length_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(sample_training_trajectory(1, 10, 0.05, &mut rng).unwrap().len(), 1);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let t = sample_trajectory_length(4, &mut rng);
            assert!((1..=4).contains(&t));
            counts[t] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in &counts[1..] {
            assert!((*c as f64 - n as f64 / 4.0).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!(sample_training_trajectory(11, 10, 0.05, &mut rng).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let plan = TrajectoryPlan::new(
            vec![
                CameraPose::from_euler_deg(3.0, -1.0, 0.5, Vec3::new(0.0, -0.01, 0.05)),
                CameraPose::translation(0.0, 0.0, 0.05),
            ],
            vec![Provenance::Autopilot, Provenance::User],
        )
        .unwrap();
        let back = TrajectoryPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back.provenance, plan.provenance);
        for (a, b) in back.steps.iter().zip(&plan.steps) {
            assert!(a.distance(b) < 1e-12);
        }
        assert!(TrajectoryPlan::from_json("{\"schema\":\"nz-trajectory/1\",\"poses\":[],\"provenance\":[]}").is_err());
        assert!(TrajectoryPlan::from_json("not json").is_err());
    }
}
