//! Tracks to scored 3D instances: lift, merge, vote, evaluate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TrackRecord;
use crate::instance3d::{
    assign_superpoints, build_fragment, eval_ap, instances_from_labels, merge_instances, ApScores,
    ApThresholds, Fragment, FragmentSource, InstanceError, InstanceSet, LabeledInstances,
    LiftRejection, LiftView, MergeConfig, ScoredPoints, VoxelKey,
};
use crate::scene::Scene;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("track {id}: {got} frames, scene has {want}")]
    TrackLength { id: String, got: usize, want: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub merge: MergeConfig,
    pub ap: ApThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentSummary {
    pub track: String,
    pub keyframe: usize,
    pub points: usize,
    pub reprojection_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackRejection {
    NoVisibleFrame,
    Lift(LiftRejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    /// Accepted fragments in track order; instance fragment indices refer here.
    pub fragments: Vec<FragmentSummary>,
    pub rejected: Vec<(String, TrackRejection)>,
    pub instances: InstanceSet,
    pub labeled: Option<LabeledInstances>,
    /// Sorted occupied voxels per instance, emitted when voting is skipped.
    pub voxel_labels: Option<Vec<Vec<VoxelKey>>>,
    pub ap: Option<ApScores>,
    pub warnings: Vec<String>,
}

/// Runs the full pipeline. Tracks without a keyframe start at their first
/// visible frame.
pub fn run_pipeline(
    scene: &Scene,
    tracks: &[TrackRecord],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.merge.validate()?;
    for t in tracks {
        if t.track.len() != scene.len() {
            return Err(PipelineError::TrackLength {
                id: t.id.clone(),
                got: t.track.len(),
                want: scene.len(),
            });
        }
    }
    let view = |t: usize| {
        scene.frames.get(t).map(|f| LiftView {
            depth: &f.depth,
            pose: &f.pose,
            intrinsics: &f.intrinsics,
            reference_depth: f.gt_depth.as_ref(),
        })
    };
    let built: Vec<Result<Result<Fragment, TrackRejection>, InstanceError>> = tracks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let Some(keyframe) = t
                .keyframe
                .or_else(|| (0..t.track.len()).find(|&k| t.track.is_visible(k)))
            else {
                return Ok(Err(TrackRejection::NoVisibleFrame));
            };
            let source = FragmentSource {
                keyframe,
                mask_id: i as u32,
            };
            Ok(build_fragment(source, &t.track, view, &cfg.merge)?.map_err(TrackRejection::Lift))
        })
        .collect();

    let mut fragments = Vec::new();
    let mut summaries = Vec::new();
    let mut rejected = Vec::new();
    for (t, r) in tracks.iter().zip(built) {
        match r? {
            Ok(f) => {
                summaries.push(FragmentSummary {
                    track: t.id.clone(),
                    keyframe: f.source.keyframe,
                    points: f.points.len(),
                    reprojection_score: f.reprojection_score,
                });
                fragments.push(f);
            }
            Err(reason) => rejected.push((t.id.clone(), reason)),
        }
    }

    let instances = merge_instances(&fragments, &cfg.merge)?;
    let mut warnings = Vec::new();
    let (labeled, voxel_labels) = match (&scene.superpoints, &scene.points) {
        (Some(sp), Some(points)) => (
            Some(assign_superpoints(
                &instances,
                &fragments,
                sp,
                points,
                cfg.merge.voxel_size,
            )?),
            None,
        ),
        _ => {
            warnings.push(
                "superpoints or scene points missing: voting skipped, emitting voxel labels".into(),
            );
            let voxels = instances
                .instances
                .iter()
                .map(|inst| {
                    let mut keys: Vec<VoxelKey> = inst
                        .fragments
                        .iter()
                        .flat_map(|&f| fragments[f].voxels(cfg.merge.voxel_size))
                        .collect();
                    keys.sort_unstable();
                    keys.dedup();
                    keys
                })
                .collect();
            (None, Some(voxels))
        }
    };

    let ap = match (&labeled, &scene.gt_labels) {
        (Some(l), Some(gt_labels)) => {
            let gt = instances_from_labels(gt_labels);
            if gt.is_empty() {
                warnings.push("ground truth has no instances: AP skipped".into());
                None
            } else {
                let pred: Vec<ScoredPoints> = l.instances.iter().map(ScoredPoints::from).collect();
                Some(eval_ap(&pred, &gt, &cfg.ap)?)
            }
        }
        (Some(_), None) => {
            warnings.push("no ground-truth instances: AP skipped".into());
            None
        }
        _ => None,
    };

    Ok(PipelineOutput {
        fragments: summaries,
        rejected,
        instances,
        labeled,
        voxel_labels,
        ap,
        warnings,
    })
}
