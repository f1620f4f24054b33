//! Procedural heightfield landscapes rendered by ray marching, with exact
//! disparity. Used as ground truth wherever real multi-view data would be.
//!
//! World axes follow the camera convention (+y down), so terrain height is
//! measured along −y and the ground lies at positive `y` below a camera at the
//! origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{CameraPose, Intrinsics, Vec3};
use crate::image::RgbdImage;

pub const SKY_DISPARITY: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticScene {
    pub seed: u64,
    pub octaves: u32,
    /// Peak-to-trough terrain relief in scene units.
    pub amplitude: f64,
    /// Horizontal scale of the largest terrain feature.
    pub feature_size: f64,
    /// Ground level below the camera origin.
    pub ground_depth: f64,
    /// Row (fraction of height) where the horizon sits in the default view.
    pub sky_row: f64,
    /// Low, high and rock colours for terrain; two colours for the sky
    /// gradient (horizon, zenith).
    pub palette: [[f64; 3]; 5],
    /// Distance at which fog reaches 63%.
    pub fog_distance: f64,
    pub max_distance: f64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            seed: 0,
            octaves: 4,
            amplitude: 0.8,
            feature_size: 6.0,
            ground_depth: 1.5,
            sky_row: 0.4,
            palette: [
                [0.22, 0.42, 0.18],
                [0.55, 0.58, 0.30],
                [0.50, 0.46, 0.42],
                [0.78, 0.84, 0.90],
                [0.32, 0.52, 0.85],
            ],
            fog_distance: 60.0,
            max_distance: 80.0,
        }
    }
}

fn hash(x: i64, y: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinate
    let mut z = seed
        .wrapping_add((x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (xi, yi) = (xi as i64, yi as i64);
    let a = hash(xi, yi, seed);
    let b = hash(xi + 1, yi, seed);
    let c = hash(xi, yi + 1, seed);
    let d = hash(xi + 1, yi + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

fn fbm(x: f64, y: f64, octaves: u32, seed: u64) -> f64 {
    let (mut sum, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0, 0.0);
    for o in 0..octaves {
        sum += amp * value_noise(x * freq, y * freq, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        freq *= 2.03;
    }
    if norm > 0.0 {
        sum / norm
    } else {
        0.5
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl SyntheticScene {
    /// A scene with its own seed and a palette jittered around the default.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut s = Self {
            seed: rng.random(),
            amplitude: rng.random_range(0.5..1.1),
            feature_size: rng.random_range(4.0..9.0),
            sky_row: rng.random_range(0.3..0.5),
            ..Self::default()
        };
        for c in s.palette.iter_mut() {
            for v in c.iter_mut() {
                *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.02, 0.98);
            }
        }
        s
    }

    /// Terrain surface `y` (positive = below the origin) at horizontal `(x, z)`.
    /// The relief is faded out within a few units of the origin so the camera
    /// always starts above open ground.
    pub fn ground_y(&self, x: f64, z: f64) -> f64 {
        if self.amplitude == 0.0 {
            return self.ground_depth;
        }
        let h = fbm(x / self.feature_size, z / self.feature_size, self.octaves, self.seed);
        let r2 = x * x + z * z;
        let fade = 1.0 - (-r2 / 9.0).exp();
        self.ground_depth - self.amplitude * h * (0.35 + 0.65 * fade)
    }

    /// Pitch (degrees) that puts the horizon at `sky_row` of the frame.
    pub fn default_pose(&self, k: &Intrinsics) -> CameraPose {
        let row = self.sky_row * (k.height as f64 - 1.0);
        let pitch = ((row - k.cy) / k.fy).atan().to_degrees();
        CameraPose::from_euler_deg(0.0, pitch, 0.0, Vec3::zeros())
    }

    fn sky_color(&self, dir: &Vec3) -> [f64; 3] {
        let d = dir.normalize();
        let elevation = (-d.y).max(0.0);
        let base = mix(self.palette[3], self.palette[4], elevation.powf(0.6) * 1.6);
        // clouds: fixed on the sphere of directions so rotation alone moves them
        let dome = 2.0 / (elevation + 0.25);
        let cloud = fbm(d.x * dome + 10.0, d.z * dome, 3, self.seed ^ 0xC10D);
        let c = ((cloud - 0.45) * 2.5).clamp(0.0, 1.0) * (elevation * 4.0).min(1.0);
        mix(base, [0.95, 0.95, 0.95], c * 0.7)
    }

    fn ground_color(&self, p: &Vec3) -> [f64; 3] {
        let rel = ((self.ground_depth - p.y) / self.amplitude.max(1e-9)).clamp(0.0, 1.0);
        let tex = fbm(p.x * 0.9 + 3.0, p.z * 0.9 - 5.0, 2, self.seed ^ 0x7E57);
        let base = mix(self.palette[0], self.palette[1], rel * 1.2 + (tex - 0.5) * 0.6);
        mix(base, self.palette[2], ((rel - 0.7) * 3.0).max(0.0))
    }

    /// First terrain hit along `origin + t·dir` (dir not normalized), by
    /// marching then bisection.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let len = dir.norm();
        let above = |t: f64| {
            let p = origin + dir * t;
            p.y < self.ground_y(p.x, p.z)
        };
        if !above(0.0) {
            return Some(0.0);
        }
        let t_max = self.max_distance / len;
        let mut t = 0.0;
        let mut step = 0.02 / len;
        while t < t_max {
            let next = t + step;
            if !above(next) {
                let (mut lo, mut hi) = (t, next);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if above(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            t = next;
            // larger steps far away; terrain detail there is sub-pixel
            step = (0.02 + 0.015 * t * len) / len;
        }
        None
    }

    /// Render the view from `pose` (camera-to-world). Disparity is `1/z` in the
    /// camera frame, clamped to at most 1, and `SKY_DISPARITY` for sky.
    pub fn render(&self, pose: &CameraPose, k: &Intrinsics) -> RgbdImage {
        let fog = mix(self.palette[3], [0.8, 0.8, 0.82], 0.5);
        RgbdImage::from_fn(k.width, k.height, |x, y| {
            let ray_cam = k.ray(x as f64, y as f64);
            let dir = pose.rotation * ray_cam;
            match self.intersect(&pose.translation, &dir) {
                Some(t) => {
                    let p = pose.translation + dir * t;
                    let dist = (dir * t).norm();
                    let f = 1.0 - (-dist / self.fog_distance).exp();
                    let c = mix(self.ground_color(&p), fog, f);
                    // ray_cam has unit z, so t is the camera-frame depth
                    (c, (1.0 / t.max(1e-9)).min(1.0))
                }
                None => (self.sky_color(&dir), SKY_DISPARITY),
            }
        })
    }
}

/// `n` distinct random scenes, each with its default pose turned to a random
/// heading.
pub fn synthetic_views(n: usize, size: usize, seed: u64) -> Vec<(SyntheticScene, CameraPose)> {
    let k = Intrinsics::square(size, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scene = SyntheticScene::random(&mut rng);
            let yaw = rng.random_range(-180.0..180.0);
            let base = scene.default_pose(&k);
            (scene, CameraPose::from_euler_deg(yaw, 0.0, 0.0, Vec3::zeros()).compose(&base))
        })
        .collect()
}

/// Renders of [`synthetic_views`].
pub fn synthetic_collection(n: usize, size: usize, seed: u64) -> Result<Vec<RgbdImage>> {
    let k = Intrinsics::square(size, 1.0);
    Ok(synthetic_views(n, size, seed)
        .iter()
        .map(|(scene, pose)| scene.render(pose, &k))
        .collect())
}
