use proptest::prelude::*;

use nz_core::geometry::{CameraPose, Intrinsics, Vec3};
use nz_core::image::RgbdImage;
use nz_core::model::{RefinerConfig, RefinerState};
use nz_core::renderer::{splat_coverage, warp, SplatConfig};
use nz_core::sky::{sky_mask, SkyMaskConfig};
use nz_core::training::{current_t_max, Schedule};
use nz_core::trajectory::{sample_virtual_pose, PoseSamplerConfig, Provenance, TrajectoryPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 16;

fn arb_image() -> impl Strategy<Value = RgbdImage> {
    (
        prop::collection::vec(0.0..=1.0f64, 3 * N * N),
        prop::collection::vec(0.01..=1.0f64, N * N),
    )
        .prop_map(|(rgb, d)| RgbdImage::from_rgb_disparity(N, N, rgb, d).unwrap())
}

fn arb_small_pose() -> impl Strategy<Value = CameraPose> {
    (-5.0..5.0f64, -5.0..5.0f64, -0.2..0.2f64, -0.2..0.2f64, -0.3..0.3f64)
        .prop_map(|(yaw, pitch, x, y, z)| CameraPose::from_euler_deg(yaw, pitch, 0.0, Vec3::new(x, y, z)))
}

fn k() -> Intrinsics {
    Intrinsics::square(N, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn identity_warp_reproduces_input(img in arb_image()) {
        let out = warp(&img, &CameraPose::identity(), &k(), &SplatConfig::default()).unwrap();
        for (a, b) in out.image.rgb.iter().zip(&img.rgb) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert!(out.mask.data.iter().all(|m| (m - 1.0).abs() < 1e-6));
    }

    #[test]
    fn warp_output_is_valid(img in arb_image(), pose in arb_small_pose()) {
        let out = warp(&img, &pose, &k(), &SplatConfig::default()).unwrap();
        prop_assert!(out.image.validate().is_ok());
        prop_assert!(out.mask.data.iter().all(|m| (0.0..=1.0).contains(m)));
        // holes carry no colour weight
        let n = N * N;
        for i in 0..n {
            if out.mask.data[i] == 0.0 {
                prop_assert!(out.image.validity[i] == 0.0);
            }
        }
    }

    #[test]
    fn splat_weight_is_conserved_up_to_the_border(img in arb_image(), dx in -0.4..0.4f64, dy in -0.4..0.4f64) {
        // sub-pixel lateral shift of a constant-depth plane
        let flat = RgbdImage::from_rgb_disparity(N, N, img.rgb.clone(), vec![0.5; N * N]).unwrap();
        let f = k().fx;
        let pose = CameraPose::from_euler_deg(0.0, 0.0, 0.0, Vec3::new(dx / (f * 0.5), dy / (f * 0.5), 0.0));
        let cov = splat_coverage(&flat, &pose, &k(), &SplatConfig::default()).unwrap();
        // only the weight pushed across the border by the shift may be lost
        let total: f64 = cov.iter().sum();
        let n2 = (N * N) as f64;
        prop_assert!(total <= n2 + 1e-9);
        prop_assert!(total >= n2 - N as f64 * (dx.abs() + dy.abs()) - 1e-6, "total {}", total);
        prop_assert!(cov.iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn refined_frames_are_valid(img in arb_image(), pose in arb_small_pose(), noise in prop::collection::vec(-3.0..3.0f64, 4)) {
        let model = RefinerState::new(RefinerConfig::for_size(N, 2, 4).unwrap(), 3).unwrap();
        let w = warp(&img, &pose, &k(), &SplatConfig::default()).unwrap();
        let out = model.refine(&w, &noise, false).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert!(out.disparity.iter().all(|d| *d > 0.0));
        prop_assert!(out.validity.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sky_mask_is_a_probability(img in arb_image()) {
        let m = sky_mask(&img, &SkyMaskConfig::default());
        prop_assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn schedule_grows_monotonically(pre in 0u64..50, grow in 1u64..20, t_max in 1usize..8, step in 0u64..400) {
        let s = Schedule { pretrain_steps: pre, grow_interval: grow, t_max, ..Schedule::default() };
        let a = current_t_max(step, &s);
        let b = current_t_max(step + 1, &s);
        prop_assert!(a <= b && b <= t_max && b - a <= 1);
        prop_assert_eq!(a == 0, step < pre);
    }

    #[test]
    fn virtual_poses_respect_bounds(seed in any::<u64>(), tx in 0.0..0.3f64, tz in 0.0..0.3f64) {
        let cfg = PoseSamplerConfig { max_translation: [tx, 0.0, tz], max_rotation_deg: [2.0, 2.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_virtual_pose(&cfg, &mut rng);
        prop_assert!(p.translation.x.abs() <= tx && p.translation.y == 0.0 && p.translation.z.abs() <= tz);
    }

    #[test]
    fn trajectory_json_round_trips(poses in prop::collection::vec(arb_small_pose(), 1..6)) {
        let prov = poses.iter().enumerate().map(|(i, _)| if i % 2 == 0 { Provenance::Autopilot } else { Provenance::User }).collect();
        let plan = TrajectoryPlan::new(poses, prov).unwrap();
        let back = TrajectoryPlan::from_json(&plan.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.provenance, plan.provenance);
        for (a, b) in back.steps.iter().zip(&plan.steps) {
            prop_assert_eq!(a.to_matrix(), b.to_matrix());
        }
    }
}
