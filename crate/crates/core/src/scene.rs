//! In-memory scene: posed RGB-D frames with per-object masks, plus the
//! optional scene point cloud, superpoint partition and ground-truth labels.

use std::collections::BTreeMap;

use crate::geometry::{BinaryMask, CameraFrame, CameraIntrinsics, CameraPose, DepthMap, Point3};
use crate::instance3d::SuperpointPartition;

pub type ObjectId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub depth: DepthMap,
    /// Optional independent depth used to score reprojection agreement.
    pub gt_depth: Option<DepthMap>,
    pub masks: BTreeMap<ObjectId, BinaryMask>,
}

impl SceneFrame {
    pub fn camera(&self) -> CameraFrame {
        CameraFrame {
            intrinsics: self.intrinsics,
            pose: self.pose,
            depth: self.depth.clone(),
        }
    }

    /// Mask of `object` if present and nonempty.
    pub fn visible_mask(&self, object: ObjectId) -> Option<&BinaryMask> {
        self.masks.get(&object).filter(|m| !m.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub id: String,
    pub frames: Vec<SceneFrame>,
    pub points: Option<Vec<Point3>>,
    pub superpoints: Option<SuperpointPartition>,
    /// Per scene point ground-truth instance id; negative means unlabeled.
    pub gt_labels: Option<Vec<i64>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Indices of frames in which `object` has a nonempty mask.
    pub fn visible_frames(&self, object: ObjectId) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.visible_mask(object).is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// All object ids that appear in any frame, ascending.
    pub fn object_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<_> = self
            .frames
            .iter()
            .flat_map(|f| f.masks.keys().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
