//! Class-agnostic 3D instances from tracked 2D masks.
//!
//! Tracked masks are eroded, lifted through depth and pose into world-space
//! fragments, merged by 3D voxel overlap or 2D temporal overlap, and finally
//! resolved to superpoint labels by majority vote. [`eval_ap`] scores the
//! result against ground-truth instances with the usual scan-benchmark AP
//! protocol.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    back_project, point_agrees, BinaryMask, CameraIntrinsics, CameraPose, DepthMap, GeometryError,
    Point3, PointCloud, ReferenceFrame, DEFAULT_DEPTH_REL_TOL,
};
use crate::metrics::MaskTrack;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error("fragment {0:?} has no points")]
    EmptyFragment(FragmentSource),
    #[error("invalid superpoint partition: {0}")]
    InvalidPartition(String),
    #[error("superpoint partition covers {partition} points but the scene has {points}")]
    PartitionSize { partition: usize, points: usize },
    #[error("ground truth has no instances")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub voxel_size: f64,
    pub theta_3d: f64,
    pub theta_iou: f64,
    pub theta_prec: f64,
    pub erosion_radius: usize,
    pub depth_rel_tol: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            theta_3d: 0.25,
            theta_iou: 0.5,
            theta_prec: 0.8,
            erosion_radius: 1,
            depth_rel_tol: DEFAULT_DEPTH_REL_TOL,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(InstanceError::InvalidConfig(format!(
                "voxel_size must be positive (got {})",
                self.voxel_size
            )));
        }
        for (name, v) in [
            ("theta_3d", self.theta_3d),
            ("theta_iou", self.theta_iou),
            ("theta_prec", self.theta_prec),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(InstanceError::InvalidConfig(format!(
                    "{name} must be in [0, 1] (got {v})"
                )));
            }
        }
        if !(self.depth_rel_tol.is_finite() && self.depth_rel_tol >= 0.0) {
            return Err(InstanceError::InvalidConfig(
                "depth_rel_tol must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Morphological erosion with a `(2r+1)²` square element. Pixels outside the
/// raster count as background, so border pixels erode away.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let span = 2 * radius + 1;

    // a window is fully set iff it lies inside the raster and its count is `span`
    let pass = |len: usize, get: &dyn Fn(usize) -> bool| -> Vec<bool> {
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + get(i) as usize;
        }
        (0..len)
            .map(|i| {
                i >= radius
                    && i + radius < len
                    && prefix[i + radius + 1] - prefix[i - radius] == span
            })
            .collect()
    };

    let mut horizontal = vec![false; w * h];
    for v in 0..h {
        let row = pass(w, &|u| mask.get(u, v));
        horizontal[v * w..(v + 1) * w].copy_from_slice(&row);
    }
    let mut out = BinaryMask::empty(w, h);
    for u in 0..w {
        let col = pass(h, &|v| horizontal[v * w + u]);
        for (v, on) in col.into_iter().enumerate() {
            if on {
                out.set(u, v, true);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FragmentSource {
    pub keyframe: usize,
    pub mask_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftRejection {
    EmptyAfterErosion,
    NoValidDepth,
    DepthDisagreement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoints {
    pub cloud: PointCloud,
    /// Fraction of valid-depth points whose depth agrees with the reference
    /// depth (1 when no reference depth is supplied).
    pub reprojection_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LiftOutcome {
    Lifted(LiftedPoints),
    Rejected(LiftRejection),
}

/// Erode, back-project and move one mask into world coordinates.
///
/// With `reference_depth`, each lifted point is re-projected into the same
/// view and dropped unless it agrees with the reference depth within
/// `cfg.depth_rel_tol`.
pub fn lift_fragment(
    mask: &BinaryMask,
    depth: &DepthMap,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    cfg: &MergeConfig,
    reference_depth: Option<&DepthMap>,
) -> Result<LiftOutcome, InstanceError> {
    let eroded = erode(mask, cfg.erosion_radius);
    if eroded.is_empty() {
        return Ok(LiftOutcome::Rejected(LiftRejection::EmptyAfterErosion));
    }
    let lifted = back_project(&eroded, depth, intr)?;
    if lifted.cloud.is_empty() {
        return Ok(LiftOutcome::Rejected(LiftRejection::NoValidDepth));
    }
    let total = lifted.cloud.len();
    let kept: Vec<Point3> = match reference_depth {
        Some(reference) => {
            if reference.width() != intr.width || reference.height() != intr.height {
                return Err(GeometryError::DimensionMismatch {
                    what: "reference depth",
                    got_w: reference.width(),
                    got_h: reference.height(),
                    want_w: intr.width,
                    want_h: intr.height,
                }
                .into());
            }
            lifted
                .cloud
                .points
                .into_iter()
                .filter(|p| point_agrees(p, reference, intr, cfg.depth_rel_tol))
                .collect()
        }
        None => lifted.cloud.points,
    };
    if kept.is_empty() {
        return Ok(LiftOutcome::Rejected(LiftRejection::DepthDisagreement));
    }
    let reprojection_score = kept.len() as f64 / total as f64;
    let world = kept.iter().map(|p| pose.to_world(p)).collect();
    Ok(LiftOutcome::Lifted(LiftedPoints {
        cloud: PointCloud::new(world, ReferenceFrame::World),
        reprojection_score,
    }))
}

/// World-space points of one tracked keyframe mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub source: FragmentSource,
    pub points: PointCloud,
    pub track: MaskTrack,
    pub reprojection_score: f64,
}

impl Fragment {
    pub fn voxels(&self, voxel_size: f64) -> VoxelSet {
        voxelize(&self.points.points, voxel_size)
    }
}

/// A frame's data as needed for lifting.
#[derive(Debug, Clone, Copy)]
pub struct LiftView<'a> {
    pub depth: &'a DepthMap,
    pub pose: &'a CameraPose,
    pub intrinsics: &'a CameraIntrinsics,
    pub reference_depth: Option<&'a DepthMap>,
}

/// Lifts every visible frame of a track from the keyframe onward and unions
/// the results. Frames before the keyframe are ignored: propagation is
/// forward-only.
pub fn build_fragment<'a>(
    source: FragmentSource,
    track: &MaskTrack,
    views: impl Fn(usize) -> Option<LiftView<'a>>,
    cfg: &MergeConfig,
) -> Result<Result<Fragment, LiftRejection>, InstanceError> {
    let mut points = Vec::new();
    let mut weighted_score = 0.0;
    let mut weight = 0usize;
    let mut last_rejection = LiftRejection::EmptyAfterErosion;
    let mut forward = MaskTrack::absent(track.len());
    for t in source.keyframe..track.len() {
        let Some(mask) = track.visible(t) else {
            continue;
        };
        forward.frames[t] = Some(mask.clone());
        let Some(view) = views(t) else { continue };
        match lift_fragment(
            mask,
            view.depth,
            view.pose,
            view.intrinsics,
            cfg,
            view.reference_depth,
        )? {
            LiftOutcome::Lifted(l) => {
                let n = l.cloud.len();
                weighted_score += l.reprojection_score * n as f64;
                weight += n;
                points.extend(l.cloud.points);
            }
            LiftOutcome::Rejected(r) => last_rejection = r,
        }
    }
    if points.is_empty() {
        return Ok(Err(last_rejection));
    }
    Ok(Ok(Fragment {
        source,
        points: PointCloud::new(points, ReferenceFrame::World),
        track: forward,
        reprojection_score: weighted_score / weight as f64,
    }))
}

pub type VoxelKey = [i64; 3];
pub type VoxelSet = HashSet<VoxelKey>;

pub fn voxel_key(p: &Point3, voxel_size: f64) -> VoxelKey {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

pub fn voxelize(points: &[Point3], voxel_size: f64) -> VoxelSet {
    points.iter().map(|p| voxel_key(p, voxel_size)).collect()
}

/// `|A ∩ B| / min(|A|, |B|)`; zero if either set is empty.
pub fn voxel_overlap(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if small.is_empty() {
        return 0.0;
    }
    small.iter().filter(|k| large.contains(*k)).count() as f64 / small.len() as f64
}

pub fn overlap3d(a: &Fragment, b: &Fragment, voxel_size: f64) -> Result<f64, InstanceError> {
    for f in [a, b] {
        if f.points.is_empty() {
            return Err(InstanceError::EmptyFragment(f.source));
        }
    }
    Ok(voxel_overlap(&a.voxels(voxel_size), &b.voxels(voxel_size)))
}

/// Mean IoU and mean containment precision (`|A∩B| / min(|A|,|B|)`) over
/// frames where both tracks are visible; `(0, 0)` when never co-visible.
pub fn temporal_overlap2d(a: &MaskTrack, b: &MaskTrack) -> (f64, f64) {
    let mut iou_sum = 0.0;
    let mut prec_sum = 0.0;
    let mut n = 0usize;
    for t in 0..a.len().min(b.len()) {
        let (Some(ma), Some(mb)) = (a.visible(t), b.visible(t)) else {
            continue;
        };
        if !ma.same_shape(mb) {
            continue;
        }
        let (inter, union) = ma.intersection_union(mb);
        iou_sum += inter as f64 / union as f64;
        prec_sum += inter as f64 / ma.area().min(mb.area()) as f64;
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (iou_sum / n as f64, prec_sum / n as f64)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Indices into the fragment list the set was built from, ascending.
    pub fragments: Vec<usize>,
    pub point_count: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Whether two fragments should join the same instance.
pub fn should_merge(
    a: &Fragment,
    va: &VoxelSet,
    b: &Fragment,
    vb: &VoxelSet,
    cfg: &MergeConfig,
) -> bool {
    if voxel_overlap(va, vb) >= cfg.theta_3d {
        return true;
    }
    let (iou, prec) = temporal_overlap2d(&a.track, &b.track);
    // never co-visible tracks carry no 2D evidence
    (iou > 0.0 || prec > 0.0) && (iou >= cfg.theta_iou || prec >= cfg.theta_prec)
}

/// Connected components of the merge graph. Instances are ordered by their
/// lowest fragment index; confidence is the point count normalized by the
/// largest instance.
pub fn merge_instances(
    fragments: &[Fragment],
    cfg: &MergeConfig,
) -> Result<InstanceSet, InstanceError> {
    cfg.validate()?;
    for f in fragments {
        if f.points.is_empty() {
            return Err(InstanceError::EmptyFragment(f.source));
        }
    }
    let voxels: Vec<VoxelSet> = fragments.iter().map(|f| f.voxels(cfg.voxel_size)).collect();
    let mut uf = UnionFind::new(fragments.len());
    for i in 0..fragments.len() {
        for j in i + 1..fragments.len() {
            if should_merge(&fragments[i], &voxels[i], &fragments[j], &voxels[j], cfg) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_to_group: HashMap<usize, usize> = HashMap::new();
    for i in 0..fragments.len() {
        let root = uf.find(i);
        let g = *root_to_group.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let counts: Vec<usize> = groups
        .iter()
        .map(|g| g.iter().map(|&i| fragments[i].points.len()).sum())
        .collect();
    let max = counts.iter().copied().max().unwrap_or(1).max(1);
    Ok(InstanceSet {
        instances: groups
            .into_iter()
            .zip(counts)
            .map(|(fragments, point_count)| Instance {
                fragments,
                point_count,
                confidence: point_count as f64 / max as f64,
            })
            .collect(),
    })
}

/// Dense superpoint id per scene point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    labels: Vec<u32>,
    count: usize,
}

impl SuperpointPartition {
    /// Every id in `0..max+1` must be used.
    pub fn new(labels: Vec<u32>) -> Result<Self, InstanceError> {
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(InstanceError::InvalidPartition(format!(
                "superpoint id {missing} is unused"
            )));
        }
        Ok(Self { labels, count })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_superpoints(&self) -> usize {
        self.count
    }

    pub fn num_points(&self) -> usize {
        self.labels.len()
    }
}

/// An instance expressed over scene points, ready for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    /// Index of the source instance in the unlabeled [`InstanceSet`].
    pub source: usize,
    pub superpoints: BTreeSet<u32>,
    /// Scene point indices, ascending.
    pub points: Vec<u32>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledInstances {
    pub instances: Vec<LabeledInstance>,
    /// Owning instance (index into `instances`) per superpoint.
    pub superpoint_owner: Vec<Option<usize>>,
}

/// Observation counts per (superpoint, instance): how many times scene points
/// of the superpoint fall in a voxel of a member fragment.
pub fn superpoint_votes(
    instances: &InstanceSet,
    fragments: &[Fragment],
    partition: &SuperpointPartition,
    scene_points: &[Point3],
    voxel_size: f64,
) -> Result<Vec<HashMap<usize, usize>>, InstanceError> {
    if partition.num_points() != scene_points.len() {
        return Err(InstanceError::PartitionSize {
            partition: partition.num_points(),
            points: scene_points.len(),
        });
    }
    // voxel -> (instance -> number of member fragments containing it)
    let mut hits: HashMap<VoxelKey, HashMap<usize, usize>> = HashMap::new();
    for (inst_id, inst) in instances.instances.iter().enumerate() {
        for &f in &inst.fragments {
            for key in fragments[f].voxels(voxel_size) {
                *hits.entry(key).or_default().entry(inst_id).or_default() += 1;
            }
        }
    }
    let mut votes = vec![HashMap::new(); partition.num_superpoints()];
    for (p, &sp) in scene_points.iter().zip(partition.labels()) {
        if let Some(h) = hits.get(&voxel_key(p, voxel_size)) {
            for (&inst, &n) in h {
                *votes[sp as usize].entry(inst).or_insert(0) += n;
            }
        }
    }
    Ok(votes)
}

/// Majority vote: each superpoint goes to the instance observing it most
/// often (ties to the lower instance id); unobserved superpoints stay
/// unassigned. Instances left without superpoints are dropped.
pub fn assign_superpoints(
    instances: &InstanceSet,
    fragments: &[Fragment],
    partition: &SuperpointPartition,
    scene_points: &[Point3],
    voxel_size: f64,
) -> Result<LabeledInstances, InstanceError> {
    let votes = superpoint_votes(instances, fragments, partition, scene_points, voxel_size)?;
    let winner: Vec<Option<usize>> = votes
        .iter()
        .map(|v| {
            v.iter()
                .filter(|(_, &n)| n > 0)
                .max_by(|(ia, na), (ib, nb)| na.cmp(nb).then(ib.cmp(ia)))
                .map(|(&i, _)| i)
        })
        .collect();

    let mut superpoints: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); instances.len()];
    for (sp, w) in winner.iter().enumerate() {
        if let Some(i) = w {
            superpoints[*i].insert(sp as u32);
        }
    }
    let mut remap = vec![None; instances.len()];
    let mut out = Vec::new();
    for (i, sps) in superpoints.into_iter().enumerate() {
        if sps.is_empty() {
            continue;
        }
        remap[i] = Some(out.len());
        out.push(LabeledInstance {
            source: i,
            superpoints: sps,
            points: Vec::new(),
            confidence: instances.instances[i].confidence,
        });
    }
    let superpoint_owner: Vec<Option<usize>> =
        winner.iter().map(|w| w.and_then(|i| remap[i])).collect();
    for (p, &sp) in partition.labels().iter().enumerate() {
        if let Some(owner) = superpoint_owner[sp as usize] {
            out[owner].points.push(p as u32);
        }
    }
    Ok(LabeledInstances {
        instances: out,
        superpoint_owner,
    })
}

/// A scored point set for AP evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredPoints {
    /// Ascending scene point indices.
    pub points: Vec<u32>,
    pub confidence: f64,
}

impl From<&LabeledInstance> for ScoredPoints {
    fn from(l: &LabeledInstance) -> Self {
        Self {
            points: l.points.clone(),
            confidence: l.confidence,
        }
    }
}

/// Ground-truth point sets from per-point labels, ordered by label; negative
/// labels are ignored.
pub fn instances_from_labels(labels: &[i64]) -> Vec<Vec<u32>> {
    let mut by_label: std::collections::BTreeMap<i64, Vec<u32>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            by_label.entry(l).or_default().push(i as u32);
        }
    }
    by_label.into_values().collect()
}

fn sorted_iou(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP at one IoU threshold: greedy one-to-one matching in descending
/// confidence order, all-point interpolated precision-recall area.
pub fn average_precision_at(pred: &[ScoredPoints], gt: &[Vec<u32>], threshold: f64) -> f64 {
    if gt.is_empty() || pred.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].confidence.total_cmp(&pred[a].confidence));

    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(pred.len());
    let mut recall = Vec::with_capacity(pred.len());
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gpts) in gt.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = sorted_iou(&pred[p].points, gpts);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gt.len() as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApThresholds {
    /// Thresholds averaged into the headline AP.
    pub averaged: Vec<f64>,
    pub ap50: f64,
    pub ap25: f64,
}

impl Default for ApThresholds {
    fn default() -> Self {
        Self {
            averaged: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
            ap50: 0.5,
            ap25: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

pub fn eval_ap(
    pred: &[ScoredPoints],
    gt: &[Vec<u32>],
    thresholds: &ApThresholds,
) -> Result<ApScores, InstanceError> {
    if gt.is_empty() {
        return Err(InstanceError::EmptyGroundTruth);
    }
    let ap = thresholds
        .averaged
        .iter()
        .map(|&t| average_precision_at(pred, gt, t))
        .sum::<f64>()
        / thresholds.averaged.len().max(1) as f64;
    Ok(ApScores {
        ap,
        ap50: average_precision_at(pred, gt, thresholds.ap50),
        ap25: average_precision_at(pred, gt, thresholds.ap25),
    })
}
