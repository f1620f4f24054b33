use nz_core::geometry::{CameraPose, Intrinsics, Vec3};
use nz_core::image::RgbdImage;
use nz_core::renderer::{cycle_warp, warp, SplatConfig};
use nz_core::synthetic::SyntheticScene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean absolute colour error of `warp(render(p), q)` against `render(q)` over
/// fully covered pixels.
fn warp_vs_rerender(scene: &SyntheticScene, p: &CameraPose, q: &CameraPose, k: &Intrinsics) -> (f64, usize) {
    let src = scene.render(p, k);
    let truth = scene.render(q, k);
    // relative pose: target camera in source frame
    let rel = p.invert().compose(q);
    let out = warp(&src, &rel, k, &SplatConfig::default()).unwrap();
    let n = src.pixels();
    let (mut err, mut count) = (0.0, 0);
    for i in 0..n {
        if out.mask.data[i] > 0.5 {
            for c in 0..3 {
                err += (out.image.rgb[c * n + i] - truth.rgb[c * n + i]).abs();
            }
            count += 1;
        }
    }
    (err / (3 * count.max(1)) as f64, count)
}

#[test]
fn synthetic_warp_matches_rerender() {
    let k = Intrinsics::square(64, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scene = SyntheticScene::random(&mut rng);
        let base = scene.default_pose(&k);
        let jitter = |rng: &mut ChaCha8Rng| {
            let t = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let t = t * (rng.random_range(0.0..0.2) / t.norm().max(1e-9));
            CameraPose::from_euler_deg(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), 0.0, t)
        };
        let p = base.compose(&jitter(&mut rng));
        let q = base.compose(&jitter(&mut rng));
        // keep the translation between the two views within 0.2
        let q = CameraPose { translation: p.translation + (q.translation - p.translation).normalize() * (q.translation - p.translation).norm().min(0.2), ..q };
        let (err, count) = warp_vs_rerender(&scene, &p, &q, &k);
        assert!(count > 64 * 64 / 2, "too few covered pixels: {count}");
        worst = worst.max(err);
    }
    assert!(worst <= 3e-2, "worst mean error {worst}");
    eprintln!("worst warp-vs-rerender error {worst:.4}");
}

/// Far plane at disparity 1/8, near square at disparity 1/2; a lateral move of
/// 0.25 shifts them by 1 and 4 pixels at fx = 32.
fn two_layer() -> (RgbdImage, Intrinsics) {
    let k = Intrinsics::new(32.0, 32.0, 15.5, 15.5, 32, 32).unwrap();
    let img = RgbdImage::from_fn(32, 32, |x, y| {
        let near = (12..20).contains(&x) && (12..20).contains(&y);
        let c = [0.2 + 0.02 * x as f64, 0.3 + 0.015 * y as f64, if near { 0.9 } else { 0.1 }];
        (c, if near { 0.5 } else { 0.125 })
    });
    (img, k)
}

/// Integer z-buffer: a source pixel survives iff it lands in frame at the
/// virtual view and is the nearest there.
fn zbuffer_survivors(img: &RgbdImage, shift: impl Fn(f64) -> i64) -> Vec<bool> {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut best = vec![f64::NEG_INFINITY; (w * h) as usize];
    let land = |x: i64, d: f64| x - shift(d);
    for y in 0..h {
        for x in 0..w {
            let d = img.disparity_at(x as usize, y as usize);
            let xt = land(x, d);
            if (0..w).contains(&xt) {
                let q = (y * w + xt) as usize;
                best[q] = best[q].max(d);
            }
        }
    }
    let mut alive = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let d = img.disparity_at(x as usize, y as usize);
            let xt = land(x, d);
            alive[(y * w + x) as usize] = (0..w).contains(&xt) && best[(y * w + xt) as usize] == d;
        }
    }
    alive
}

#[test]
fn two_layer_disocclusion_band() {
    let (img, k) = two_layer();
    let tx = 0.25;
    let out = cycle_warp(&img, &CameraPose::translation(tx, 0.0, 0.0), &k, &SplatConfig::default()).unwrap();
    let alive = zbuffer_survivors(&img, |d| (k.fx * tx * d).round() as i64);
    let mut mismatches = Vec::new();
    for y in 0..32 {
        for x in 0..32 {
            let i = y * 32 + x;
            let m = out.mask.data[i];
            if alive[i] != (m > 0.5) {
                mismatches.push((x, y, m));
            }
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:?}");
    // the band itself: 3 columns left of the square are hidden by it
    for y in 12..20 {
        for x in 9..12 {
            assert_eq!(out.mask.at(x, y), 0.0);
        }
        assert_eq!(out.mask.at(8, y), 1.0);
    }
}

#[test]
fn plane_cycle_keeps_content() {
    let k = Intrinsics::square(32, 1.0);
    let img = RgbdImage::from_fn(32, 32, |x, y| {
        let (u, v) = (x as f64 / 31.0, y as f64 / 31.0);
        ([0.5 + 0.3 * (3.0 * u).sin(), 0.4 + 0.3 * v * v, 0.5 + 0.2 * (2.0 * (u + v)).cos()], 0.3)
    });
    let pose = CameraPose::from_euler_deg(0.8, -0.5, 0.0, Vec3::new(0.04, -0.03, 0.06));
    let out = cycle_warp(&img, &pose, &k, &SplatConfig::default()).unwrap();
    let n = 32 * 32;
    let mut covered = 0;
    for i in 0..n {
        if out.mask.data[i] == 1.0 {
            covered += 1;
            for c in 0..3 {
                assert!((out.image.rgb[c * n + i] - img.rgb[c * n + i]).abs() < 2e-2);
            }
        }
    }
    assert!(covered > n * 3 / 4, "covered {covered}");
}
