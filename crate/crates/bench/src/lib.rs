//! Seeded fixtures shared by the benchmarks.

use geovos_core::geometry::{
    BinaryMask, CameraFrame, CameraIntrinsics, CameraPose, DepthMap, Point3,
};
use geovos_core::ingest::boxworld::{generate_boxworld, two_cube_layout, BoxWorld, BoxWorldConfig};
use geovos_core::metrics::MaskTrack;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A candidate view with a centered elliptical mask and a reference view
/// rotated slightly around the same target, both `w × h`.
pub fn overlap_pair(
    w: usize,
    h: usize,
    seed: u64,
) -> (CameraFrame, BinaryMask, CameraIntrinsics, CameraPose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::centered(w as f64, w, h).expect("positive focal");
    let target = Point3::zeros();
    let up = Point3::new(0.0, -1.0, 0.0);
    let cand = CameraPose::look_at(Point3::new(0.0, 0.0, -3.0), target, up).expect("valid look-at");
    let reference =
        CameraPose::look_at(Point3::new(0.8, 0.2, -2.9), target, up).expect("valid look-at");
    let depth = DepthMap::new(
        w,
        h,
        (0..w * h).map(|_| rng.random_range(2.5f32..3.5)).collect(),
    )
    .expect("sized");
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mask = BinaryMask::from_fn(w, h, |u, v| {
        let (dx, dy) = (
            (u as f64 - cx) / (0.35 * w as f64),
            (v as f64 - cy) / (0.35 * h as f64),
        );
        dx * dx + dy * dy <= 1.0
    });
    (
        CameraFrame {
            intrinsics: intr,
            pose: cand,
            depth,
        },
        mask,
        intr,
        reference,
    )
}

/// Ground truth with visibility runs and a prediction that flips a few
/// pixels per frame.
pub fn track_pair(len: usize, w: usize, h: usize, seed: u64) -> (MaskTrack, MaskTrack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visible = true;
    let mut gt = Vec::with_capacity(len);
    let mut pred = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.random_bool(0.1) {
            visible = !visible;
        }
        let g = visible.then(|| {
            let (x0, y0) = (rng.random_range(0..w / 2), rng.random_range(0..h / 2));
            BinaryMask::from_fn(w, h, |u, v| {
                u >= x0 && v >= y0 && u < x0 + w / 3 && v < y0 + h / 3
            })
        });
        let p = g.clone().map(|mut m| {
            for _ in 0..w {
                let (u, v) = (rng.random_range(0..w), rng.random_range(0..h));
                m.set(u, v, !m.get(u, v));
            }
            m
        });
        gt.push(g);
        pred.push(p);
    }
    (MaskTrack::new(pred), MaskTrack::new(gt))
}

pub fn two_cube_world(size: usize) -> BoxWorld {
    let (boxes, cameras) = two_cube_layout(size).expect("valid layout");
    generate_boxworld(&boxes, &cameras, &BoxWorldConfig::default()).expect("valid layout")
}
