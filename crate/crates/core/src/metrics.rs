//! Video object segmentation metrics.
//!
//! Three per-track scores are reported:
//!
//! - **IoU** averages the per-frame IoU over every frame, including frames in
//!   which the object is absent. A frame where both prediction and ground
//!   truth are empty scores 1, so correct rejections count as success.
//! - **Positive IoU** averages over frames with a nonempty ground-truth mask.
//! - **Successful IoU** further restricts to those frames where the prediction
//!   overlaps the ground truth (per-frame IoU > 0).
//!
//! The module also builds the reappearance-focused subset (tracks with several
//! disjoint visible segments) and picks the conditioning frame for
//! evaluation runs.

use std::collections::BTreeSet;
use std::iter::Rev;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shape mismatch at frame {frame}: {pred_w}x{pred_h} vs {gt_w}x{gt_h}")]
    ShapeMismatch {
        frame: usize,
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("track length mismatch: prediction has {pred} frames, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("track has no visible frame")]
    NoVisibleFrame,
    #[error("conditioning frame {cond} out of range for {len} frames")]
    FrameOutOfRange { cond: usize, len: usize },
    #[error("invalid subset config: {0}")]
    InvalidConfig(String),
}

/// Per-frame optional masks for one object over a whole video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskTrack {
    pub frames: Vec<Option<BinaryMask>>,
}

impl MaskTrack {
    pub fn new(frames: Vec<Option<BinaryMask>>) -> Self {
        Self { frames }
    }

    pub fn absent(len: usize) -> Self {
        Self {
            frames: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Nonempty mask at `frame`, if any.
    pub fn visible(&self, frame: usize) -> Option<&BinaryMask> {
        self.frames
            .get(frame)
            .and_then(|m| m.as_ref())
            .filter(|m| !m.is_empty())
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        self.visible(frame).is_some()
    }

    pub fn area(&self, frame: usize) -> usize {
        self.visible(frame).map_or(0, BinaryMask::area)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub iou: f64,
    pub positive_iou: Option<f64>,
    pub successful_iou: Option<f64>,
    pub n_frames: usize,
    pub n_positive: usize,
    pub n_successful: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetConfig {
    /// Visible runs must be strictly longer than this many frames.
    pub l_min: usize,
    /// Minimum number of qualifying runs for subset membership.
    pub seg_min: usize,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        Self {
            l_min: 5,
            seg_min: 2,
        }
    }
}

impl SubsetConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.l_min < 1 || self.seg_min < 1 {
            return Err(MetricsError::InvalidConfig(format!(
                "l_min and seg_min must be >= 1 (got {}, {})",
                self.l_min, self.seg_min
            )));
        }
        Ok(())
    }
}

fn nonempty(m: Option<&BinaryMask>) -> Option<&BinaryMask> {
    m.filter(|m| !m.is_empty())
}

/// IoU of one frame. Absent and empty masks are equivalent.
pub fn frame_iou(pred: Option<&BinaryMask>, gt: Option<&BinaryMask>) -> Result<f64, MetricsError> {
    frame_iou_at(0, pred, gt)
}

fn frame_iou_at(
    frame: usize,
    pred: Option<&BinaryMask>,
    gt: Option<&BinaryMask>,
) -> Result<f64, MetricsError> {
    if let (Some(p), Some(g)) = (pred, gt) {
        if !p.same_shape(g) {
            return Err(MetricsError::ShapeMismatch {
                frame,
                pred_w: p.width(),
                pred_h: p.height(),
                gt_w: g.width(),
                gt_h: g.height(),
            });
        }
    }
    Ok(match (nonempty(pred), nonempty(gt)) {
        (None, None) => 1.0,
        (Some(_), None) | (None, Some(_)) => 0.0,
        (Some(p), Some(g)) => {
            let (inter, union) = p.intersection_union(g);
            inter as f64 / union as f64
        }
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn track_metrics(pred: &MaskTrack, gt: &MaskTrack) -> Result<TrackScores, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut all = Vec::with_capacity(gt.len());
    let mut positive = Vec::new();
    let mut successful = Vec::new();
    for (t, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        let iou = frame_iou_at(t, p.as_ref(), g.as_ref())?;
        all.push(iou);
        if gt.is_visible(t) {
            positive.push(iou);
            if iou > 0.0 {
                successful.push(iou);
            }
        }
    }
    Ok(TrackScores {
        // an empty track has no frames to disagree on
        iou: mean(&all).unwrap_or(1.0),
        positive_iou: mean(&positive),
        successful_iou: mean(&successful),
        n_frames: all.len(),
        n_positive: positive.len(),
        n_successful: successful.len(),
    })
}

/// Number of maximal visible runs longer than `l_min` frames.
pub fn count_visible_segments(gt: &MaskTrack, l_min: usize) -> usize {
    let mut count = 0;
    let mut run = 0;
    for t in 0..=gt.len() {
        if t < gt.len() && gt.is_visible(t) {
            run += 1;
        } else {
            if run > l_min {
                count += 1;
            }
            run = 0;
        }
    }
    count
}

/// Ids of tracks with at least `seg_min` qualifying visible segments.
pub fn select_subset<'a, K, I>(tracks: I, cfg: &SubsetConfig) -> Result<BTreeSet<K>, MetricsError>
where
    K: Ord + Clone + 'a,
    I: IntoIterator<Item = (&'a K, &'a MaskTrack)>,
{
    cfg.validate()?;
    Ok(tracks
        .into_iter()
        .filter(|(_, t)| count_visible_segments(t, cfg.l_min) >= cfg.seg_min)
        .map(|(k, _)| k.clone())
        .collect())
}

/// Frame with the largest visible mask area; ties go to the earliest frame.
pub fn pick_conditioning_frame(gt: &MaskTrack) -> Result<usize, MetricsError> {
    let mut best: Option<(usize, usize)> = None;
    for t in 0..gt.len() {
        let area = gt.area(t);
        if area > 0 && best.is_none_or(|(_, a)| area > a) {
            best = Some((t, area));
        }
    }
    best.map(|(t, _)| t).ok_or(MetricsError::NoVisibleFrame)
}

/// Forward frames `cond..=T−1` and backward frames `cond..=0`, both
/// starting at the conditioning frame.
pub fn split_directions(
    cond: usize,
    len: usize,
) -> Result<(RangeInclusive<usize>, Rev<RangeInclusive<usize>>), MetricsError> {
    if cond >= len {
        return Err(MetricsError::FrameOutOfRange { cond, len });
    }
    Ok((cond..=len - 1, (0..=cond).rev()))
}

/// Mean of each metric over tracks, skipping undefined per-track values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub n_tracks: usize,
    pub iou: Option<f64>,
    pub positive_iou: Option<f64>,
    pub successful_iou: Option<f64>,
}

pub fn aggregate<'a>(scores: impl IntoIterator<Item = &'a TrackScores>) -> AggregateScores {
    let scores: Vec<&TrackScores> = scores.into_iter().collect();
    let collect = |f: &dyn Fn(&TrackScores) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = scores.iter().filter_map(|s| f(s)).collect();
        mean(&v)
    };
    AggregateScores {
        n_tracks: scores.len(),
        iou: collect(&|s| Some(s.iou)),
        positive_iou: collect(&|s| s.positive_iou),
        successful_iou: collect(&|s| s.successful_iou),
    }
}
