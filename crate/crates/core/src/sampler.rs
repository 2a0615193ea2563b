//! Training-frame selection. Frames come from a continuous window, a naive
//! random draw, or a draw restricted to frames that overlap the reference
//! camera's field of view; the mixed policy picks one mode per sample.
//!
//! All draws take an explicit RNG so results are reproducible from a seed.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{frustum_overlap_ratio, GeometryError};
use crate::scene::{ObjectId, Scene};

/// FOV overlap threshold used in training.
pub const DEFAULT_TAU: f64 = 0.25;
/// Probability of choosing FOV-aware sampling for posed RGB-D datasets.
pub const DEFAULT_P_FOV: f64 = 0.8;
/// Clip length matching an eight-slot memory bank.
pub const DEFAULT_N_FRAMES: usize = 8;
pub const DEFAULT_MAX_CANDIDATES: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("object {object} is visible in {available} frames, {required} required")]
    TooFewFrames {
        object: ObjectId,
        available: usize,
        required: usize,
    },
    #[error("object {object} is not visible in any frame")]
    NoVisibleFrames { object: ObjectId },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_frames: usize,
    pub tau: f64,
    pub p_fov: f64,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_frames: DEFAULT_N_FRAMES,
            tau: DEFAULT_TAU,
            p_fov: DEFAULT_P_FOV,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_frames < 2 {
            return Err(SamplerError::InvalidConfig(format!(
                "n_frames must be >= 2 (got {})",
                self.n_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SamplerError::InvalidConfig(format!(
                "tau must be in [0, 1] (got {})",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.p_fov) {
            return Err(SamplerError::InvalidConfig(format!(
                "p_fov must be in [0, 1] (got {})",
                self.p_fov
            )));
        }
        if self.max_candidates == 0 {
            return Err(SamplerError::InvalidConfig(
                "max_candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Continuous,
    Random,
    Fov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRatio {
    pub frame: usize,
    pub ratio: f64,
    pub inside: usize,
    pub total: usize,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub object: ObjectId,
    pub mode: SampleMode,
    pub reference_frame: usize,
    /// Reference first, then the remaining frames in ascending order.
    pub frames: Vec<usize>,
    /// Frames added by the fallback fill because too few candidates passed τ.
    pub fallback_frames: Vec<usize>,
    pub candidate_ratios: Vec<CandidateRatio>,
}

impl SampleResult {
    pub fn used_fallback(&self) -> bool {
        !self.fallback_frames.is_empty()
    }
}

/// `n_frames` consecutive object-visible frames from a uniform start.
pub fn sample_continuous<R: Rng + ?Sized>(
    scene: &Scene,
    object: ObjectId,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult, SamplerError> {
    cfg.validate()?;
    let visible = scene.visible_frames(object);
    if visible.len() < cfg.n_frames {
        return Err(SamplerError::TooFewFrames {
            object,
            available: visible.len(),
            required: cfg.n_frames,
        });
    }
    let start = rng.random_range(0..=visible.len() - cfg.n_frames);
    let frames = visible[start..start + cfg.n_frames].to_vec();
    Ok(SampleResult {
        object,
        mode: SampleMode::Continuous,
        reference_frame: frames[0],
        frames,
        fallback_frames: Vec::new(),
        candidate_ratios: Vec::new(),
    })
}

/// Uniform draw of `n_frames` distinct object-visible frames; the first draw
/// is the reference.
pub fn sample_random<R: Rng + ?Sized>(
    scene: &Scene,
    object: ObjectId,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult, SamplerError> {
    cfg.validate()?;
    let visible = scene.visible_frames(object);
    if visible.len() < cfg.n_frames {
        return Err(SamplerError::TooFewFrames {
            object,
            available: visible.len(),
            required: cfg.n_frames,
        });
    }
    let picks = index::sample(rng, visible.len(), cfg.n_frames).into_vec();
    let reference_frame = visible[picks[0]];
    let mut rest: Vec<usize> = picks[1..].iter().map(|&i| visible[i]).collect();
    rest.sort_unstable();
    let mut frames = vec![reference_frame];
    frames.extend(rest);
    Ok(SampleResult {
        object,
        mode: SampleMode::Random,
        reference_frame,
        frames,
        fallback_frames: Vec::new(),
        candidate_ratios: Vec::new(),
    })
}

/// Candidate frames for a reference: every other frame, uniformly strided
/// down to at most `max_candidates`.
fn candidate_frames(
    n_frames_in_scene: usize,
    reference: usize,
    max_candidates: usize,
) -> Vec<usize> {
    let all: Vec<usize> = (0..n_frames_in_scene).filter(|&f| f != reference).collect();
    if all.len() <= max_candidates {
        return all;
    }
    (0..max_candidates)
        .map(|i| all[i * all.len() / max_candidates])
        .collect()
}

/// Whether a candidate with the given overlap passes threshold `tau`.
/// `tau == 0` disables the filter; candidates still need a valid masked point.
pub fn passes_threshold(ratio: f64, degenerate: bool, tau: f64) -> bool {
    !degenerate && (tau <= 0.0 || ratio > tau)
}

/// Overlap ratio of every candidate's object points with the reference frustum.
pub fn candidate_ratios(
    scene: &Scene,
    object: ObjectId,
    reference: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<CandidateRatio>, SamplerError> {
    let ref_frame = &scene.frames[reference];
    let mut out = Vec::new();
    for frame in candidate_frames(scene.len(), reference, cfg.max_candidates) {
        let f = &scene.frames[frame];
        let (ratio, inside, total, degenerate) = match f.masks.get(&object) {
            Some(mask) => {
                let r = frustum_overlap_ratio(
                    &f.camera(),
                    mask,
                    &ref_frame.intrinsics,
                    &ref_frame.pose,
                )?;
                (r.ratio, r.inside, r.total, r.degenerate)
            }
            None => (0.0, 0, 0, true),
        };
        out.push(CandidateRatio {
            frame,
            ratio,
            inside,
            total,
            eligible: passes_threshold(ratio, degenerate, cfg.tau),
        });
    }
    Ok(out)
}

/// FOV-aware sampling: a uniform visible reference, then `n_frames − 1`
/// distinct frames drawn from candidates whose masked points fall inside the
/// reference frustum by more than τ.
///
/// When the eligible pool is too small, the remaining slots are filled with
/// the highest-ratio ineligible candidates that have at least one valid
/// masked point (ties by frame index), and recorded in `fallback_frames`.
pub fn sample_fov<R: Rng + ?Sized>(
    scene: &Scene,
    object: ObjectId,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult, SamplerError> {
    cfg.validate()?;
    let visible = scene.visible_frames(object);
    if visible.is_empty() {
        return Err(SamplerError::NoVisibleFrames { object });
    }
    let reference_frame = visible[rng.random_range(0..visible.len())];
    let ratios = candidate_ratios(scene, object, reference_frame, cfg)?;
    let need = cfg.n_frames - 1;

    let pool: Vec<usize> = ratios
        .iter()
        .filter(|c| c.eligible)
        .map(|c| c.frame)
        .collect();
    let mut chosen: Vec<usize>;
    let mut fallback = Vec::new();
    if pool.len() >= need {
        chosen = index::sample(rng, pool.len(), need)
            .into_iter()
            .map(|i| pool[i])
            .collect();
    } else {
        chosen = pool;
        let mut rest: Vec<&CandidateRatio> = ratios
            .iter()
            .filter(|c| !c.eligible && c.total > 0)
            .collect();
        rest.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.frame.cmp(&b.frame)));
        fallback = rest
            .iter()
            .take(need - chosen.len())
            .map(|c| c.frame)
            .collect();
        chosen.extend(&fallback);
    }
    chosen.sort_unstable();
    fallback.sort_unstable();
    let mut frames = vec![reference_frame];
    frames.extend(chosen);
    Ok(SampleResult {
        object,
        mode: SampleMode::Fov,
        reference_frame,
        frames,
        fallback_frames: fallback,
        candidate_ratios: ratios,
    })
}

/// Bernoulli(`p_fov`) choice between FOV-aware and continuous sampling.
pub fn sample_mixed<R: Rng + ?Sized>(
    scene: &Scene,
    object: ObjectId,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult, SamplerError> {
    cfg.validate()?;
    if rng.random_bool(cfg.p_fov) {
        sample_fov(scene, object, cfg, rng)
    } else {
        sample_continuous(scene, object, cfg, rng)
    }
}
