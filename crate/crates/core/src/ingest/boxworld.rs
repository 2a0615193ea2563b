//! Synthetic scenes of axis-aligned boxes rendered by exact ray casting.
//!
//! Depth is the camera-frame `z` of the first ray-box hit, masks give each
//! pixel to the nearest box (lower index on exact ties), scene points sit at
//! face-cell centers with one superpoint per face, and the ground-truth
//! instance of every point is its box index.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{IngestError, TrackRecord};
use crate::geometry::{BinaryMask, CameraIntrinsics, CameraPose, DepthMap, Point3};
use crate::instance3d::SuperpointPartition;
use crate::metrics::MaskTrack;
use crate::scene::{ObjectId, Scene, SceneFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl AxisBox {
    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            min[i] = center[i] - size[i] / 2.0;
            max[i] = center[i] + size[i] / 2.0;
        }
        Self { min, max }
    }

    fn interiors_intersect(&self, other: &AxisBox) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    fn strictly_contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| self.min[i] < p[i] && p[i] < self.max[i])
    }

    /// Distance from `p` to the box surface, zero on it.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        let inside = self.strictly_contains(p);
        if inside {
            (0..3)
                .map(|i| (p[i] - self.min[i]).min(self.max[i] - p[i]))
                .fold(f64::INFINITY, f64::min)
        } else {
            let d: Vector3<f64> =
                Vector3::from_fn(|i, _| (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0));
            d.norm()
        }
    }
}

/// Entry parameter of the ray `origin + t·dir` into `b`, if it hits in front
/// of the origin.
pub fn ray_box(origin: &Point3, dir: &Vector3<f64>, b: &AxisBox) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < b.min[i] || origin[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[i] - origin[i]) / dir[i];
        let t2 = (b.max[i] - origin[i]) / dir[i];
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    (t_exit >= t_enter && t_enter > 0.0).then_some(t_enter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCamera {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxWorldConfig {
    pub scene_id: String,
    /// Target spacing of scene points on box faces.
    pub surface_step: f64,
}

impl Default for BoxWorldConfig {
    fn default() -> Self {
        Self {
            scene_id: "boxworld".into(),
            surface_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxWorld {
    pub scene: Scene,
    /// Scene point indices of each box, in box order.
    pub gt_instances: Vec<Vec<u32>>,
    /// Visible masks of each box across all cameras.
    pub gt_tracks: BTreeMap<ObjectId, MaskTrack>,
}

pub fn generate_boxworld(
    boxes: &[AxisBox],
    cameras: &[BoxCamera],
    cfg: &BoxWorldConfig,
) -> Result<BoxWorld, IngestError> {
    let bad = |m: String| Err(IngestError::BoxWorld(m));
    if !(cfg.surface_step.is_finite() && cfg.surface_step > 0.0) {
        return bad(format!(
            "surface_step must be positive (got {})",
            cfg.surface_step
        ));
    }
    for (i, b) in boxes.iter().enumerate() {
        if (0..3).any(|k| !(b.min[k].is_finite() && b.max[k].is_finite() && b.min[k] < b.max[k])) {
            return bad(format!("box {i} has non-positive or non-finite extent"));
        }
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].interiors_intersect(&boxes[j]) {
                return bad(format!("boxes {i} and {j} intersect"));
            }
        }
    }
    for (c, cam) in cameras.iter().enumerate() {
        cam.intrinsics
            .validate()
            .map_err(|e| IngestError::BoxWorld(format!("camera {c}: {e}")))?;
        if let Some(i) = boxes
            .iter()
            .position(|b| b.strictly_contains(cam.pose.translation()))
        {
            return bad(format!("camera {c} is inside box {i}"));
        }
    }

    let mut frames = Vec::with_capacity(cameras.len());
    let mut gt_tracks: BTreeMap<ObjectId, MaskTrack> = (0..boxes.len())
        .map(|i| (i as ObjectId, MaskTrack::absent(cameras.len())))
        .collect();
    for (c, cam) in cameras.iter().enumerate() {
        let intr = cam.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let origin = *cam.pose.translation();
        let mut depth = DepthMap::filled(w, h, 0.0);
        let mut masks: Vec<BinaryMask> = boxes.iter().map(|_| BinaryMask::empty(w, h)).collect();
        for v in 0..h {
            for u in 0..w {
                let d_cam = Vector3::new(
                    (u as f64 - intr.cx) / intr.fx,
                    (v as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                let dir = cam.pose.rotation() * d_cam;
                let mut best: Option<(usize, f64)> = None;
                for (i, b) in boxes.iter().enumerate() {
                    if let Some(t) = ray_box(&origin, &dir, b) {
                        if best.is_none_or(|(_, bt)| t < bt) {
                            best = Some((i, t));
                        }
                    }
                }
                if let Some((i, t)) = best {
                    depth.set(u, v, t as f32);
                    masks[i].set(u, v, true);
                }
            }
        }
        for (i, m) in masks.iter().enumerate() {
            if !m.is_empty() {
                gt_tracks
                    .get_mut(&(i as ObjectId))
                    .expect("track per box")
                    .frames[c] = Some(m.clone());
            }
        }
        frames.push(SceneFrame {
            intrinsics: intr,
            pose: cam.pose,
            depth,
            gt_depth: None,
            masks: masks
                .into_iter()
                .enumerate()
                .map(|(i, m)| (i as ObjectId, m))
                .collect(),
        });
    }

    let mut points = Vec::new();
    let mut superpoints = Vec::new();
    let mut labels = Vec::new();
    let mut gt_instances = Vec::with_capacity(boxes.len());
    for (bi, b) in boxes.iter().enumerate() {
        let mut members = Vec::new();
        for axis in 0..3 {
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            let n1 = ((b.max[a1] - b.min[a1]) / cfg.surface_step).ceil().max(1.0) as usize;
            let n2 = ((b.max[a2] - b.min[a2]) / cfg.surface_step).ceil().max(1.0) as usize;
            for (side, fixed) in [b.min[axis], b.max[axis]].into_iter().enumerate() {
                let face = (bi * 6 + axis * 2 + side) as u32;
                for i in 0..n1 {
                    for j in 0..n2 {
                        let mut p = Vector3::zeros();
                        p[axis] = fixed;
                        p[a1] = b.min[a1] + (i as f64 + 0.5) * (b.max[a1] - b.min[a1]) / n1 as f64;
                        p[a2] = b.min[a2] + (j as f64 + 0.5) * (b.max[a2] - b.min[a2]) / n2 as f64;
                        // stored as f32 in point files
                        let p = p.map(|c: f64| c as f32 as f64);
                        members.push(points.len() as u32);
                        points.push(p);
                        superpoints.push(face);
                        labels.push(bi as i64);
                    }
                }
            }
        }
        gt_instances.push(members);
    }
    let superpoints = if points.is_empty() {
        None
    } else {
        Some(
            SuperpointPartition::new(superpoints)
                .map_err(|e| IngestError::BoxWorld(e.to_string()))?,
        )
    };
    let scene = Scene {
        id: cfg.scene_id.clone(),
        frames,
        points: (!points.is_empty()).then_some(points),
        superpoints,
        gt_labels: (!labels.is_empty()).then_some(labels),
    };
    Ok(BoxWorld {
        scene,
        gt_instances,
        gt_tracks,
    })
}

/// Forward tracks started at every visible frame of every object: the track
/// keyed at frame `k` holds the object's masks for frames `k..`.
pub fn keyframe_tracks(gt_tracks: &BTreeMap<ObjectId, MaskTrack>) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    for (&obj, track) in gt_tracks {
        for k in 0..track.len() {
            if !track.is_visible(k) {
                continue;
            }
            let mut frames = vec![None; track.len()];
            for (t, slot) in frames.iter_mut().enumerate().skip(k) {
                *slot = track.visible(t).cloned();
            }
            out.push(TrackRecord {
                id: format!("obj{obj}_kf{k}"),
                keyframe: Some(k),
                object: Some(obj),
                track: MaskTrack::new(frames),
            });
        }
    }
    out
}

/// Camera at `eye` looking at `target` with a `size × size` image and the
/// principal point at the image center.
pub fn square_camera(
    eye: Point3,
    target: Point3,
    focal: f64,
    size: usize,
) -> Result<BoxCamera, IngestError> {
    let up = if (target - eye).cross(&Vector3::z()).norm() < 1e-9 * (target - eye).norm() {
        Vector3::y()
    } else {
        -Vector3::z()
    };
    let pose =
        CameraPose::look_at(eye, target, up).map_err(|e| IngestError::BoxWorld(e.to_string()))?;
    let intrinsics = CameraIntrinsics::centered(focal, size, size)
        .map_err(|e| IngestError::BoxWorld(e.to_string()))?;
    Ok(BoxCamera { pose, intrinsics })
}

/// Cameras on the eight-octant diagonals around `center`, six of them, each
/// `dist · √3` away and looking at `center`.
pub fn diagonal_cameras(
    center: Point3,
    dist: f64,
    focal: f64,
    size: usize,
) -> Result<Vec<BoxCamera>, IngestError> {
    const DIRS: [[f64; 3]; 6] = [
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [-1.0, -1.0, -1.0],
    ];
    DIRS.iter()
        .map(|d| square_camera(center + Vector3::from(*d) * dist, center, focal, size))
        .collect()
}

/// Two disjoint cubes with six diagonal cameras at `size × size` pixels.
pub fn two_cube_layout(size: usize) -> Result<(Vec<AxisBox>, Vec<BoxCamera>), IngestError> {
    let boxes = vec![
        AxisBox::from_center_size([-0.5, 0.0, 0.0], [0.4, 0.4, 0.4]),
        AxisBox::from_center_size([0.5, 0.1, 0.05], [0.4, 0.4, 0.4]),
    ];
    Ok((
        boxes,
        diagonal_cameras(Vector3::zeros(), 1.6, 100.0 * size as f64 / 64.0, size)?,
    ))
}

/// Two small disjoint cubes that share a single voxel of edge 0.05, so
/// their voxelized fragments overlap completely.
pub fn same_voxel_layout(size: usize) -> Result<(Vec<AxisBox>, Vec<BoxCamera>), IngestError> {
    let boxes = vec![
        AxisBox {
            min: [0.005, 0.005, 0.005],
            max: [0.02, 0.02, 0.02],
        },
        AxisBox {
            min: [0.03, 0.005, 0.005],
            max: [0.045, 0.02, 0.02],
        },
    ];
    let center = Vector3::new(0.025, 0.0125, 0.0125);
    Ok((
        boxes,
        diagonal_cameras(center, 0.12, 160.0 * size as f64 / 64.0, size)?,
    ))
}
