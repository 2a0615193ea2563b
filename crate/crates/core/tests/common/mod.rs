//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use geovos_core::geometry::{
    BinaryMask, CameraIntrinsics, CameraPose, DepthMap, LOWER_BOUND_SLACK,
};
use geovos_core::ingest::boxworld::{same_voxel_layout, two_cube_layout, AxisBox, BoxCamera};
use geovos_core::metrics::MaskTrack;
use geovos_core::scene::{Scene, SceneFrame};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) + Vector3::new(1e-3, 0.0, 0.0);
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

pub fn random_pose(rng: &mut impl Rng, spread: f64) -> CameraPose {
    let t = Vector3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    CameraPose::new(random_rotation(rng), t).expect("rotation is orthonormal")
}

pub fn random_intrinsics(rng: &mut impl Rng) -> CameraIntrinsics {
    let w = rng.random_range(4..24);
    let h = rng.random_range(4..24);
    CameraIntrinsics::new(
        rng.random_range(4.0..30.0),
        rng.random_range(4.0..30.0),
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
        w,
        h,
    )
    .unwrap()
}

/// Depth with a sprinkling of invalid pixels (zero, negative, NaN).
pub fn random_depth(rng: &mut impl Rng, w: usize, h: usize) -> DepthMap {
    let values = (0..w * h)
        .map(|_| match rng.random_range(0..20) {
            0 => 0.0,
            1 => f32::NAN,
            2 => -1.0,
            _ => rng.random_range(0.2f32..8.0),
        })
        .collect();
    DepthMap::new(w, h, values).unwrap()
}

/// Mask with at most `max_on` foreground pixels.
pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, max_on: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    let n = rng.random_range(0..=max_on.min(w * h));
    for _ in 0..n {
        m.set(rng.random_range(0..w), rng.random_range(0..h), true);
    }
    m
}

pub fn random_scene(rng: &mut impl Rng, max_frames: usize, max_points: usize) -> Scene {
    let n = rng.random_range(1..=max_frames);
    let frames = (0..n)
        .map(|_| {
            let intr = random_intrinsics(rng);
            let (w, h) = (intr.width, intr.height);
            let mut masks = BTreeMap::new();
            masks.insert(0, random_mask(rng, w, h, max_points));
            SceneFrame {
                intrinsics: intr,
                pose: random_pose(rng, 2.0),
                depth: random_depth(rng, w, h),
                gt_depth: None,
                masks,
            }
        })
        .collect();
    Scene {
        id: "random".into(),
        frames,
        ..Scene::default()
    }
}

/// Per-pixel loop: lift, move to world, move into the reference camera,
/// test `z > z_near` and the half-open image rectangle (lower bounds slack).
pub fn naive_overlap(
    cand: &SceneFrame,
    mask: &BinaryMask,
    ref_intr: &CameraIntrinsics,
    ref_pose: &CameraPose,
    z_near: f64,
) -> (usize, usize) {
    let intr = &cand.intrinsics;
    let (mut inside, mut total) = (0, 0);
    for v in 0..intr.height {
        for u in 0..intr.width {
            if !mask.get(u, v) {
                continue;
            }
            let d = cand.depth.get(u, v);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            total += 1;
            let z = d as f64;
            let pc = Vector3::new(
                (u as f64 - intr.cx) * z / intr.fx,
                (v as f64 - intr.cy) * z / intr.fy,
                z,
            );
            let pw = cand.pose.rotation() * pc + cand.pose.translation();
            let pr = ref_pose.rotation().transpose() * (pw - ref_pose.translation());
            if pr.z <= z_near {
                continue;
            }
            let pu = ref_intr.fx * pr.x / pr.z + ref_intr.cx;
            let pv = ref_intr.fy * pr.y / pr.z + ref_intr.cy;
            if pu >= -LOWER_BOUND_SLACK
                && pu < ref_intr.width as f64
                && pv >= -LOWER_BOUND_SLACK
                && pv < ref_intr.height as f64
            {
                inside += 1;
            }
        }
    }
    (inside, total)
}

/// Random track with visibility runs, so segment counts vary.
pub fn random_track(rng: &mut impl Rng, len: usize, w: usize, h: usize) -> MaskTrack {
    let mut frames = Vec::with_capacity(len);
    let mut visible = rng.random_bool(0.5);
    for _ in 0..len {
        if rng.random_bool(0.2) {
            visible = !visible;
        }
        frames.push(if visible {
            let m = random_mask(rng, w, h, w * h);
            Some(m)
        } else if rng.random_bool(0.1) {
            Some(BinaryMask::empty(w, h))
        } else {
            None
        });
    }
    MaskTrack::new(frames)
}

/// Perturbed copy of `gt` as a prediction.
pub fn perturbed_track(rng: &mut impl Rng, gt: &MaskTrack, w: usize, h: usize) -> MaskTrack {
    MaskTrack::new(
        gt.frames
            .iter()
            .map(|f| match rng.random_range(0..4) {
                0 => None,
                1 => Some(random_mask(rng, w, h, w * h)),
                _ => f.as_ref().map(|m| {
                    let mut m = m.clone();
                    for _ in 0..3 {
                        let (u, v) = (rng.random_range(0..w), rng.random_range(0..h));
                        m.set(u, v, !m.get(u, v));
                    }
                    m
                }),
            })
            .collect(),
    )
}

fn brute_area(m: Option<&BinaryMask>) -> usize {
    m.map_or(0, |m| {
        let mut n = 0;
        for v in 0..m.height() {
            for u in 0..m.width() {
                n += m.get(u, v) as usize;
            }
        }
        n
    })
}

pub fn brute_frame_iou(p: Option<&BinaryMask>, g: Option<&BinaryMask>) -> f64 {
    let (pa, ga) = (brute_area(p), brute_area(g));
    if pa == 0 && ga == 0 {
        return 1.0;
    }
    if pa == 0 || ga == 0 {
        return 0.0;
    }
    let (p, g) = (p.unwrap(), g.unwrap());
    let (mut inter, mut union) = (0usize, 0usize);
    for v in 0..g.height() {
        for u in 0..g.width() {
            let (a, b) = (p.get(u, v), g.get(u, v));
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    inter as f64 / union as f64
}

/// `(iou, positive, successful)` by explicit loops.
pub fn brute_track_metrics(pred: &MaskTrack, gt: &MaskTrack) -> (f64, Option<f64>, Option<f64>) {
    let mut all = Vec::new();
    let mut pos = Vec::new();
    let mut succ = Vec::new();
    for t in 0..gt.len() {
        let iou = brute_frame_iou(pred.frames[t].as_ref(), gt.frames[t].as_ref());
        all.push(iou);
        if brute_area(gt.frames[t].as_ref()) > 0 {
            pos.push(iou);
            if iou > 0.0 {
                succ.push(iou);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for x in v {
                s += x;
            }
            Some(s / v.len() as f64)
        }
    };
    (mean(&all).unwrap_or(1.0), mean(&pos), mean(&succ))
}

/// Runs of visibility longer than `l_min`, found by scanning run starts.
pub fn brute_segments(gt: &MaskTrack, l_min: usize) -> usize {
    let vis: Vec<bool> = (0..gt.len())
        .map(|t| brute_area(gt.frames[t].as_ref()) > 0)
        .collect();
    let mut count = 0;
    let mut t = 0;
    while t < vis.len() {
        if vis[t] && (t == 0 || !vis[t - 1]) {
            let mut end = t;
            while end < vis.len() && vis[end] {
                end += 1;
            }
            if end - t > l_min {
                count += 1;
            }
        }
        t += 1;
    }
    count
}

pub fn brute_conditioning(gt: &MaskTrack) -> Option<usize> {
    let areas: Vec<usize> = (0..gt.len())
        .map(|t| brute_area(gt.frames[t].as_ref()))
        .collect();
    let max = *areas.iter().max()?;
    if max == 0 {
        return None;
    }
    areas.iter().position(|&a| a == max)
}

pub fn two_cube_world(size: usize) -> (Vec<AxisBox>, Vec<BoxCamera>) {
    two_cube_layout(size).unwrap()
}

pub fn same_voxel_world(size: usize) -> (Vec<AxisBox>, Vec<BoxCamera>) {
    same_voxel_layout(size).unwrap()
}
