//! `geovos`: batch driver for sampling, 3D instance merging, VOS evaluation
//! and the feature-merger gradient check.
//!
//! Exit codes: 0 success, 1 a metric or check failed, 2 bad input.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use geovos_core::ingest::{self, boxworld, TrackRecord};
use geovos_core::instance3d::{eval_ap, instances_from_labels, ScoredPoints};
use geovos_core::merger_net::{
    grad_check_instance, Fault, MergerConfig, MergerInstance, GRAD_CHECK_TOLERANCE,
};
use geovos_core::metrics::{
    aggregate, pick_conditioning_frame, select_subset, track_metrics, MaskTrack, SubsetConfig,
    TrackScores,
};
use geovos_core::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use geovos_core::sampler::{
    sample_continuous, sample_fov, sample_mixed, sample_random, SamplerConfig,
};
use geovos_core::{ObjectId, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use report::Report;

/// Default CLI tolerance for the gradient check; the library default is
/// tighter and used by the test suite.
const CLI_GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "geovos",
    version,
    about = "Geometry-aware video object segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a box-world scene with ground-truth tracks.
    Synth(SynthArgs),
    /// Draw training frame sets for each object.
    Sample(SampleArgs),
    /// Lift mask tracks to 3D fragments.
    Lift(PipelineArgs),
    /// Lift and merge fragments into instances.
    Merge(PipelineArgs),
    /// Score predicted 3D instances against a scene's ground truth.
    #[command(name = "eval-3d")]
    Eval3d(Eval3dArgs),
    /// Lift, merge, vote and evaluate.
    Pipeline(PipelineArgs),
    /// Score predicted mask tracks against ground-truth tracks.
    EvalVos(EvalVosArgs),
    /// Finite-difference check of the feature merger's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Layout {
    TwoCubes,
    SameVoxel,
    Random,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the scene.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "two-cubes")]
    layout: Layout,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Box count for the random layout.
    #[arg(long, default_value_t = 3)]
    boxes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Mixed,
    Fov,
    Random,
    Continuous,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Restrict to one object; every object otherwise.
    #[arg(long)]
    object: Option<ObjectId>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = geovos_core::sampler::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = geovos_core::sampler::DEFAULT_P_FOV)]
    p_fov: f64,
    #[arg(long, value_enum, default_value = "mixed")]
    mode: Mode,
    /// Samples drawn per object.
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value_t = 256)]
    max_candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Track-set directory holding `tracks.json`.
    #[arg(long)]
    masks: PathBuf,
    /// JSON pipeline config; missing fields take their defaults.
    #[arg(long)]
    merge_config: Option<PathBuf>,
    /// Also write the labeled instances as JSON, readable by `eval-3d`.
    #[arg(long)]
    instances_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval3dArgs {
    #[arg(long)]
    scene: PathBuf,
    /// JSON array of `{points, confidence}` instances.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalVosArgs {
    /// Predicted track-set directory.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth track-set directory.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 5)]
    lmin: usize,
    #[arg(long, default_value_t = 2)]
    segmin: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    SoftmaxBackward,
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON merger config; the desk-scale config when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = CLI_GRAD_TOLERANCE)]
    tolerance: f64,
    /// Corrupts a backward rule; negative control for the checker.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Ran to completion; `passed` is false when a check failed.
struct Outcome {
    report: Report,
    out: Option<PathBuf>,
    passed: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let start = Instant::now();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Lift(a) => cmd_pipeline("lift", a),
        Command::Merge(a) => cmd_pipeline("merge", a),
        Command::Eval3d(a) => cmd_eval_3d(a),
        Command::Pipeline(a) => cmd_pipeline("pipeline", a),
        Command::EvalVos(a) => cmd_eval_vos(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    let outcome = match result.and_then(|o| o.report.emit(o.out.as_deref()).map(|_| o)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let status = if outcome.passed { "ok" } else { "FAILED" };
    eprintln!(
        "{status}: {} items in {:.3}s",
        outcome.report.len(),
        start.elapsed().as_secs_f64()
    );
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

/// Caps the worker pool from `GEOVOS_THREADS` when set.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("GEOVOS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("GEOVOS_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("GEOVOS_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_scene(path: &Path) -> anyhow::Result<Scene> {
    Ok(ingest::load_scene(path)?)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<Outcome> {
    let (boxes, cameras) = match a.layout {
        Layout::TwoCubes => boxworld::two_cube_layout(a.size)?,
        Layout::SameVoxel => boxworld::same_voxel_layout(a.size)?,
        Layout::Random => random_layout(a.boxes, a.size, a.seed)?,
    };
    let cfg = boxworld::BoxWorldConfig {
        scene_id: format!("synth-{:?}-{}", a.layout, a.seed).to_lowercase(),
        ..Default::default()
    };
    let world = boxworld::generate_boxworld(&boxes, &cameras, &cfg)?;
    let manifest = ingest::save_scene(&world.scene, &a.out)?;
    let gt: Vec<TrackRecord> = world
        .gt_tracks
        .iter()
        .map(|(&o, t)| TrackRecord {
            id: format!("obj{o}"),
            keyframe: None,
            object: Some(o),
            track: t.clone(),
        })
        .collect();
    ingest::save_track_set(&a.out.join("gt_tracks"), &gt)?;
    ingest::save_track_set(
        &a.out.join("masks"),
        &boxworld::keyframe_tracks(&world.gt_tracks),
    )?;

    let mut report = Report::new(
        "synth",
        json!({ "layout": a.layout, "size": a.size, "boxes": boxes.len(), "seed": a.seed, "out": a.out }),
    )?;
    for (i, b) in boxes.iter().enumerate() {
        let o = i as ObjectId;
        report.push(json!({
            "box": i,
            "min": b.min,
            "max": b.max,
            "points": world.gt_instances[i].len(),
            "visible_frames": world.scene.visible_frames(o),
        }))?;
    }
    report.set_aggregate(json!({
        "manifest": manifest,
        "frames": world.scene.len(),
        "points": world.scene.points.as_ref().map_or(0, Vec::len),
    }))?;
    Ok(Outcome {
        report,
        out: a.report,
        passed: true,
    })
}

/// Non-intersecting boxes in `[-1, 1]³` seen by six diagonal cameras.
fn random_layout(
    n: usize,
    size: usize,
    seed: u64,
) -> anyhow::Result<(Vec<boxworld::AxisBox>, Vec<boxworld::BoxCamera>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<boxworld::AxisBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            bail!("could not place {n} disjoint boxes");
        }
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.4));
        let b = boxworld::AxisBox::from_center_size(c, s);
        // keep a gap so boxes stay separate instances
        let clear = boxes
            .iter()
            .all(|o| (0..3).any(|k| b.min[k] > o.max[k] + 0.1 || o.min[k] > b.max[k] + 0.1));
        if clear {
            boxes.push(b);
        }
    }
    let cams = boxworld::diagonal_cameras(
        geovos_core::geometry::Point3::zeros(),
        2.0,
        60.0 * size as f64 / 64.0,
        size,
    )?;
    Ok((boxes, cams))
}

fn cmd_sample(a: SampleArgs) -> anyhow::Result<Outcome> {
    let scene = load_scene(&a.scene)?;
    let cfg = SamplerConfig {
        n_frames: a.n,
        tau: a.tau,
        p_fov: a.p_fov,
        max_candidates: a.max_candidates,
        seed: a.seed,
    };
    cfg.validate()?;
    let objects = match a.object {
        Some(o) => vec![o],
        None => scene.object_ids(),
    };
    let mut rng = cfg.rng();
    let mut report = Report::new(
        "sample",
        json!({ "scene": a.scene, "sampler": cfg, "mode": a.mode, "draws": a.draws }),
    )?;
    let mut fallback = 0;
    for &object in &objects {
        for draw in 0..a.draws {
            let s = match a.mode {
                Mode::Mixed => sample_mixed(&scene, object, &cfg, &mut rng),
                Mode::Fov => sample_fov(&scene, object, &cfg, &mut rng),
                Mode::Random => sample_random(&scene, object, &cfg, &mut rng),
                Mode::Continuous => sample_continuous(&scene, object, &cfg, &mut rng),
            }
            .with_context(|| format!("object {object}, draw {draw}"))?;
            fallback += s.used_fallback() as usize;
            report.push(json!({ "draw": draw, "sample": s }))?;
        }
    }
    report.set_aggregate(
        json!({ "objects": objects.len(), "samples": report.len(), "fallback_samples": fallback }),
    )?;
    Ok(Outcome {
        report,
        out: a.out,
        passed: true,
    })
}

fn cmd_pipeline(command: &'static str, a: PipelineArgs) -> anyhow::Result<Outcome> {
    let scene = load_scene(&a.scene)?;
    let tracks = ingest::load_track_set(&a.masks)?;
    let cfg: PipelineConfig = match &a.merge_config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let out = run_pipeline(&scene, &tracks, &cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    if let Some(path) = &a.instances_out {
        let scored: Vec<ScoredPoints> = out
            .labeled
            .as_ref()
            .map(|l| l.instances.iter().map(ScoredPoints::from).collect())
            .unwrap_or_default();
        std::fs::write(path, serde_json::to_string_pretty(&scored)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let mut report = Report::new(
        command,
        json!({ "scene": a.scene, "masks": a.masks, "tracks": tracks.len(), "pipeline": cfg }),
    )?;
    match command {
        "lift" => lift_items(&mut report, &out)?,
        _ => instance_items(&mut report, &out)?,
    }
    let mut agg = json!({
        "fragments": out.fragments.len(),
        "rejected": out.rejected.len(),
        "instances": out.instances.len(),
        "warnings": out.warnings,
    });
    if command == "pipeline" {
        agg["ap"] = serde_json::to_value(out.ap)?;
    }
    report.set_aggregate(agg)?;
    Ok(Outcome {
        report,
        out: a.out,
        passed: true,
    })
}

fn lift_items(report: &mut Report, out: &PipelineOutput) -> anyhow::Result<()> {
    for f in &out.fragments {
        report.push(json!({ "accepted": true, "fragment": f }))?;
    }
    for (track, reason) in &out.rejected {
        report.push(json!({ "accepted": false, "track": track, "reason": reason }))?;
    }
    Ok(())
}

fn instance_items(report: &mut Report, out: &PipelineOutput) -> anyhow::Result<()> {
    for (i, inst) in out.instances.instances.iter().enumerate() {
        let tracks: Vec<&str> = inst
            .fragments
            .iter()
            .map(|&f| out.fragments[f].track.as_str())
            .collect();
        let mut item = json!({
            "instance": i,
            "tracks": tracks,
            "fragment_points": inst.point_count,
            "confidence": inst.confidence,
        });
        if let Some(l) = &out.labeled {
            let labeled = l.instances.iter().find(|li| li.source == i);
            item["superpoints"] = json!(labeled.map(|li| li.superpoints.len()));
            item["scene_points"] = json!(labeled.map(|li| li.points.len()));
        }
        if let Some(v) = &out.voxel_labels {
            item["voxels"] = json!(v[i]);
        }
        report.push(item)?;
    }
    Ok(())
}

fn cmd_eval_3d(a: Eval3dArgs) -> anyhow::Result<Outcome> {
    let scene = load_scene(&a.scene)?;
    let Some(labels) = &scene.gt_labels else {
        bail!("{}: scene has no ground-truth instances", a.scene.display())
    };
    let gt = instances_from_labels(labels);
    let pred: Vec<ScoredPoints> = read_json(&a.pred)?;
    let n_points = labels.len();
    if let Some(bad) = pred
        .iter()
        .flat_map(|p| &p.points)
        .find(|&&p| p as usize >= n_points)
    {
        bail!(
            "{}: point index {bad} beyond the scene's {n_points} points",
            a.pred.display()
        );
    }
    let thresholds = PipelineConfig::default().ap;
    let scores = eval_ap(&pred, &gt, &thresholds)?;
    let mut report = Report::new(
        "eval-3d",
        json!({ "scene": a.scene, "pred": a.pred, "thresholds": thresholds }),
    )?;
    for (i, p) in pred.iter().enumerate() {
        report
            .push(json!({ "instance": i, "points": p.points.len(), "confidence": p.confidence }))?;
    }
    report.set_aggregate(json!({ "gt_instances": gt.len(), "ap": scores }))?;
    Ok(Outcome {
        report,
        out: a.out,
        passed: true,
    })
}

#[derive(Serialize)]
struct VosItem<'a> {
    id: &'a str,
    #[serde(flatten)]
    scores: &'a TrackScores,
    conditioning_frame: Option<usize>,
    in_subset: bool,
    prediction_missing: bool,
}

fn cmd_eval_vos(a: EvalVosArgs) -> anyhow::Result<Outcome> {
    let subset_cfg = SubsetConfig {
        l_min: a.lmin,
        seg_min: a.segmin,
    };
    subset_cfg.validate()?;
    let gt = ingest::load_track_set(&a.gt)?;
    let pred: BTreeMap<String, MaskTrack> = ingest::load_track_set(&a.pred)?
        .into_iter()
        .map(|t| (t.id, t.track))
        .collect();
    let gt_map: BTreeMap<&str, &MaskTrack> = gt.iter().map(|t| (t.id.as_str(), &t.track)).collect();
    for id in pred.keys().filter(|k| !gt_map.contains_key(k.as_str())) {
        log::warn!("prediction {id} has no ground truth; ignored");
    }
    let subset = select_subset(gt_map.iter().map(|(k, v)| (k, *v)), &subset_cfg)?;

    let mut scores = Vec::with_capacity(gt.len());
    for t in &gt {
        let missing = !pred.contains_key(&t.id);
        let absent;
        let p = match pred.get(&t.id) {
            Some(p) => p,
            None => {
                log::warn!("track {} has no prediction; scored as empty", t.id);
                absent = MaskTrack::absent(t.track.len());
                &absent
            }
        };
        let s = track_metrics(p, &t.track).with_context(|| format!("track {}", t.id))?;
        scores.push((t, s, missing));
    }
    let mut report = Report::new(
        "eval-vos",
        json!({ "pred": a.pred, "gt": a.gt, "subset": subset_cfg }),
    )?;
    for (t, s, missing) in &scores {
        report.push(VosItem {
            id: &t.id,
            scores: s,
            conditioning_frame: pick_conditioning_frame(&t.track).ok(),
            in_subset: subset.contains(&t.id.as_str()),
            prediction_missing: *missing,
        })?;
    }
    let whole = aggregate(scores.iter().map(|(_, s, _)| s));
    let selected = aggregate(
        scores
            .iter()
            .filter(|(t, _, _)| subset.contains(&t.id.as_str()))
            .map(|(_, s, _)| s),
    );
    report.set_aggregate(json!({ "whole_set": whole, "selected_subset": selected }))?;
    Ok(Outcome {
        report,
        out: a.out,
        passed: true,
    })
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<Outcome> {
    let cfg: MergerConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => MergerConfig::desk(),
    };
    cfg.validate()?;
    if a.tolerance.is_nan() || a.tolerance <= 0.0 {
        bail!("tolerance must be positive (got {})", a.tolerance);
    }
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::SoftmaxBackward => Fault::SoftmaxBackward,
    });
    let inst = MergerInstance::random(&cfg, a.height, a.width, a.seed)?;
    let mut check = grad_check_instance(&inst, fault)?;
    check.tolerance = a.tolerance;
    let passed = check.passed();
    let mut report = Report::new(
        "gradcheck",
        json!({
            "merger": cfg,
            "seed": a.seed,
            "height": a.height,
            "width": a.width,
            "tolerance": a.tolerance,
            "library_tolerance": GRAD_CHECK_TOLERANCE,
            "fault": fault,
        }),
    )?;
    for t in &check.tensors {
        report.push(json!({ "tensor": t, "passed": t.rel_err < a.tolerance }))?;
    }
    report.set_aggregate(json!({
        "step": check.step,
        "max_rel_err": check.max_rel_err,
        "softmax_max_row_error": check.softmax_max_row_error,
        "passed": passed,
    }))?;
    Ok(Outcome {
        report,
        out: a.out,
        passed,
    })
}
