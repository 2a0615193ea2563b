//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use geovos_core::geometry::{
    frustum_overlap_ratio, BinaryMask, CameraIntrinsics, CameraPose, DepthMap, DEFAULT_Z_NEAR,
};
use geovos_core::ingest::{self, boxworld, IngestError};
use geovos_core::instance3d::{
    average_precision_at, eval_ap, instances_from_labels, ApThresholds, ScoredPoints,
};
use geovos_core::merger_net::{
    attention, grad_check_instance, softmax_rows, AttentionParams, LayerSel, Mat, MergerConfig,
    MergerInstance,
};
use geovos_core::metrics::{
    count_visible_segments, pick_conditioning_frame, select_subset, track_metrics, SubsetConfig,
};
use geovos_core::pipeline::{run_pipeline, PipelineConfig};
use geovos_core::sampler::{
    candidate_ratios, sample_fov, SamplerConfig, DEFAULT_P_FOV, DEFAULT_TAU,
};
use geovos_core::scene::{Scene, SceneFrame};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || {
        format!("runtime {took:.2?} exceeds {limit:?}")
    })
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pairs = 0;
    for s in 0..200 {
        let scene = common::random_scene(&mut rng, 10, 100);
        let r = rng.random_range(0..scene.len());
        let reference = &scene.frames[r];
        for (i, f) in scene.frames.iter().enumerate() {
            let mask = &f.masks[&0];
            let got =
                frustum_overlap_ratio(&f.camera(), mask, &reference.intrinsics, &reference.pose)
                    .map_err(|e| e.to_string())?;
            let (inside, total) = common::naive_overlap(
                f,
                mask,
                &reference.intrinsics,
                &reference.pose,
                DEFAULT_Z_NEAR,
            );
            let expect_ratio = if total == 0 {
                0.0
            } else {
                inside as f64 / total as f64
            };
            check(
                got.inside == inside
                    && got.total == total
                    && got.ratio == expect_ratio
                    && got.degenerate == (total == 0),
                || format!("scene {s} frame {i}: got {got:?}, oracle {inside}/{total}"),
            )?;
            pairs += 1;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!(
        "{pairs} candidate/reference pairs match the per-point loop, {:.2?}",
        start.elapsed()
    ))
}

/// Frames 0, 3, 5 look at the object along +z; frames 1, 2, 4 see their own
/// masked points in directions no other camera covers.
fn eligible_fixture() -> Scene {
    let intr = CameraIntrinsics::centered(8.0, 8, 8).unwrap();
    let mask = BinaryMask::from_fn(8, 8, |u, v| (2..6).contains(&u) && (2..6).contains(&v));
    let toward = |x: f64| CameraPose::from_translation(Vector3::new(x, 0.0, 0.0));
    let away = |dir: Vector3<f64>| {
        CameraPose::look_at(Vector3::zeros(), dir, Vector3::new(0.3, 0.2, 0.9)).unwrap()
    };
    let poses = [
        toward(0.0),
        away(Vector3::new(0.0, 1.0, 0.0)),
        away(Vector3::new(0.0, 0.0, -1.0)),
        toward(0.1),
        away(Vector3::new(-1.0, 0.0, 0.0)),
        toward(-0.1),
    ];
    let frames = poses
        .iter()
        .map(|&pose| SceneFrame {
            intrinsics: intr,
            pose,
            depth: DepthMap::filled(8, 8, 5.0),
            gt_depth: None,
            masks: BTreeMap::from([(7, mask.clone())]),
        })
        .collect();
    Scene {
        id: "eligible".into(),
        frames,
        ..Scene::default()
    }
}

fn sampler_correctness() -> Outcome {
    let scene = eligible_fixture();
    let known = [0usize, 3, 5];
    let cfg = SamplerConfig {
        n_frames: 3,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut fallback_draws = 0;
    for draw in 0..1000 {
        let s = sample_fov(&scene, 7, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let r = s.reference_frame;
        let eligible: Vec<usize> = s
            .candidate_ratios
            .iter()
            .filter(|c| c.eligible)
            .map(|c| c.frame)
            .collect();
        if known.contains(&r) {
            let expect: Vec<usize> = known.iter().copied().filter(|&f| f != r).collect();
            check(eligible == expect, || {
                format!("draw {draw}: ref {r} eligible {eligible:?}")
            })?;
        } else {
            check(eligible.is_empty(), || {
                format!("draw {draw}: ref {r} eligible {eligible:?}")
            })?;
        }
        for f in s.frames.iter().filter(|f| !s.fallback_frames.contains(f)) {
            check(*f == r || known.contains(f), || {
                format!("draw {draw}: non-fallback frame {f} outside {{ref,0,3,5}}")
            })?;
        }
        fallback_draws += s.used_fallback() as usize;
    }

    let taus = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
    for s in 0..50 {
        let scene = common::random_scene(&mut rng, 10, 100);
        let r = rng.random_range(0..scene.len());
        let mut prev: Option<Vec<usize>> = None;
        for &tau in &taus {
            let cfg = SamplerConfig {
                tau,
                ..SamplerConfig::default()
            };
            let el: Vec<usize> = candidate_ratios(&scene, 0, r, &cfg)
                .map_err(|e| e.to_string())?
                .iter()
                .filter(|c| c.eligible)
                .map(|c| c.frame)
                .collect();
            if let Some(p) = &prev {
                check(el.iter().all(|f| p.contains(f)), || {
                    format!("scene {s}: tau {tau} grew eligible set")
                })?;
            }
            prev = Some(el);
        }
    }
    Ok(format!("1000 draws respect the eligible set ({fallback_draws} used fallback); tau monotone on 50 scenes"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = SubsetConfig::default();
    let mut gts = BTreeMap::new();
    for i in 0..500 {
        let (w, h) = (rng.random_range(1..6), rng.random_range(1..6));
        let gt = common::random_track(&mut rng, 20, w, h);
        let pred = common::perturbed_track(&mut rng, &gt, w, h);
        let s = track_metrics(&pred, &gt).map_err(|e| e.to_string())?;
        let (iou, pos, succ) = common::brute_track_metrics(&pred, &gt);
        check(
            s.iou == iou && s.positive_iou == pos && s.successful_iou == succ,
            || format!("pair {i}: {s:?} vs oracle ({iou}, {pos:?}, {succ:?})"),
        )?;
        if let (Some(p), Some(q)) = (s.positive_iou, s.successful_iou) {
            check(q >= p, || {
                format!("pair {i}: successful {q} < positive {p}")
            })?;
        }
        for l_min in [0, 1, 3, 5] {
            let got = count_visible_segments(&gt, l_min);
            let want = common::brute_segments(&gt, l_min);
            check(got == want, || {
                format!("pair {i}: segments(l_min={l_min}) {got} vs {want}")
            })?;
        }
        let cond = pick_conditioning_frame(&gt).ok();
        check(cond == common::brute_conditioning(&gt), || {
            format!("pair {i}: conditioning {cond:?}")
        })?;
        gts.insert(i, gt);
    }
    let subset = select_subset(gts.iter(), &cfg).map_err(|e| e.to_string())?;
    let brute: std::collections::BTreeSet<usize> = gts
        .iter()
        .filter(|(_, t)| common::brute_segments(t, cfg.l_min) >= cfg.seg_min)
        .map(|(k, _)| *k)
        .collect();
    check(subset == brute, || {
        "selected subset differs from brute force".into()
    })?;
    Ok(format!(
        "500 track pairs match the loops; subset has {} tracks",
        subset.len()
    ))
}

fn merger_verification() -> Outcome {
    let start = Instant::now();
    let cfg = MergerConfig::desk();
    check(
        cfg.selected_layers.len() == 4 && cfg.c_mid == 8 && cfg.heads == 2,
        || format!("desk config {cfg:?}"),
    )?;
    let inst = MergerInstance::random(&cfg, 4, 4, 404).map_err(|e| e.to_string())?;
    let report = grad_check_instance(&inst, None).map_err(|e| e.to_string())?;
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    check(report.max_rel_err < 1e-4, || {
        format!("max rel err {:.3e} at {worst}", report.max_rel_err)
    })?;
    check(report.softmax_max_row_error <= 1e-6, || {
        format!("softmax row error {:.3e}", report.softmax_max_row_error)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Mat::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let p = AttentionParams {
        wq: rand_mat(&mut rng, 8, 8),
        bq: rand_mat(&mut rng, 1, 8),
        wk: rand_mat(&mut rng, 8, 8),
        wv: rand_mat(&mut rng, 8, 8),
        bv: rand_mat(&mut rng, 1, 8),
        wo: rand_mat(&mut rng, 8, 8),
        bo: rand_mat(&mut rng, 1, 8),
    };
    let q = rand_mat(&mut rng, 16, 8);
    let kv = rand_mat(&mut rng, 16, 8);
    let base = attention(&q, &kv, &kv, &p, 2).map_err(|e| e.to_string())?;
    let mut perm: Vec<usize> = (0..16).collect();
    perm.reverse();
    perm.swap(0, 5);
    let kv_p = Mat::from_fn(16, 8, |r, c| kv.get(perm[r], c));
    let permuted = attention(&q, &kv_p, &kv_p, &p, 2).map_err(|e| e.to_string())?;
    let perm_err = base
        .data
        .iter()
        .zip(&permuted.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    check(perm_err <= 1e-6, || {
        format!("KV permutation changed output by {perm_err:.3e}")
    })?;
    let sm = softmax_rows(&rand_mat(&mut rng, 32, 16));
    let row_err = (0..32)
        .map(|r| (sm.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    check(row_err <= 1e-6, || {
        format!("softmax row sum error {row_err:.3e}")
    })?;
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "{} tensors, max rel err {:.2e}, KV permutation {:.1e}, {:.2?}",
        report.tensors.len(),
        report.max_rel_err,
        perm_err,
        start.elapsed()
    ))
}

fn end_to_end_pipeline() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let wcfg = boxworld::BoxWorldConfig::default();

    let (boxes, cams) = common::two_cube_world(64);
    let world = boxworld::generate_boxworld(&boxes, &cams, &wcfg).map_err(|e| e.to_string())?;
    let tracks = boxworld::keyframe_tracks(&world.gt_tracks);
    let out = run_pipeline(&world.scene, &tracks, &cfg).map_err(|e| e.to_string())?;
    let ap = out.ap.ok_or("no AP computed")?;
    check(out.instances.len() == 2, || {
        format!("disjoint cubes gave {} instances", out.instances.len())
    })?;
    for (name, v) in [("AP", ap.ap), ("AP50", ap.ap50), ("AP25", ap.ap25)] {
        check((v - 1.0).abs() <= 1e-9, || format!("{name} = {v}"))?;
    }

    let (boxes, cams) = common::same_voxel_world(64);
    let world = boxworld::generate_boxworld(&boxes, &cams, &wcfg).map_err(|e| e.to_string())?;
    let tracks = boxworld::keyframe_tracks(&world.gt_tracks);
    let objects: std::collections::BTreeSet<_> = tracks.iter().filter_map(|t| t.object).collect();
    check(objects.len() == 2, || {
        format!("overlap case tracks cover objects {objects:?}")
    })?;
    let out = run_pipeline(&world.scene, &tracks, &cfg).map_err(|e| e.to_string())?;
    check(out.instances.len() == 1, || {
        format!("overlapping cubes gave {} instances", out.instances.len())
    })?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "2 instances with AP=AP50=AP25=1; overlapping cubes merge to 1; {:.2?}",
        start.elapsed()
    ))
}

fn ap_protocol() -> Outcome {
    let gt = vec![vec![0u32, 1, 2], vec![3, 4]];
    let pred = vec![ScoredPoints {
        points: vec![0, 1, 2],
        confidence: 0.9,
    }];
    let ap50 = average_precision_at(&pred, &gt, 0.5);
    check(ap50 == 0.5, || format!("hand-walked AP50 = {ap50}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for i in 0..20 {
        let n = rng.random_range(5..200);
        let k = rng.random_range(1..8);
        let labels: Vec<i64> = (0..n).map(|_| rng.random_range(-1..k)).collect();
        let gt = instances_from_labels(&labels);
        if gt.is_empty() {
            continue;
        }
        let pred: Vec<ScoredPoints> = gt
            .iter()
            .map(|p| ScoredPoints {
                points: p.clone(),
                confidence: rng.random_range(0.0..1.0),
            })
            .collect();
        let s = eval_ap(&pred, &gt, &ApThresholds::default()).map_err(|e| e.to_string())?;
        check(s.ap == 1.0 && s.ap50 == 1.0 && s.ap25 == 1.0, || {
            format!("fixture {i}: {s:?}")
        })?;
    }
    Ok("hand-walked AP50 = 0.5; eval_ap(x, x) = 1 on 20 fixtures".into())
}

fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    let mut left: Vec<_> = walk(a);
    let mut right: Vec<_> = walk(b);
    left.sort();
    right.sort();
    let rel = |root: &Path, v: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
        v.iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect()
    };
    check(rel(a, &left) == rel(b, &right), || {
        "file sets differ".into()
    })?;
    for (x, y) in left.iter().zip(&right) {
        check(
            std::fs::read(x).unwrap() == std::fs::read(y).unwrap(),
            || format!("{} differs", x.display()),
        )?;
    }
    Ok(())
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = Path::new("fixture");
    for i in 0..50 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let depth = common::random_depth(&mut rng, w, h);
        let b = ingest::encode_dmap(&depth);
        let back = ingest::decode_dmap(&b, p).map_err(|e| e.to_string())?;
        check(ingest::encode_dmap(&back) == b, || {
            format!("DMAP fixture {i}")
        })?;

        let pose = common::random_pose(&mut rng, 10.0);
        let text = ingest::encode_pose(&pose);
        let back = ingest::decode_pose(&text, p).map_err(|e| e.to_string())?;
        check(ingest::encode_pose(&back) == text && back == pose, || {
            format!("pose fixture {i}")
        })?;

        let mask = common::random_mask(&mut rng, w, h, w * h);
        let b = ingest::encode_pgm(&mask);
        let back = ingest::decode_pgm(&b, p).map_err(|e| e.to_string())?;
        check(ingest::encode_pgm(&back) == b && back == mask, || {
            format!("mask fixture {i}")
        })?;

        let mut scene = common::random_scene(&mut rng, 3, 30);
        scene.id = format!("scene{i}");
        let n_pts = rng.random_range(1..20);
        scene.points = Some(
            (0..n_pts)
                .map(|_| Vector3::new(rng.random_range(-1.0f32..1.0) as f64, 0.5, -0.25))
                .collect(),
        );
        scene.gt_labels = Some((0..n_pts).map(|_| rng.random_range(-1..3)).collect());
        let d1 = tmp.path().join(format!("a{i}"));
        let d2 = tmp.path().join(format!("b{i}"));
        let m1 = ingest::save_scene(&scene, &d1).map_err(|e| e.to_string())?;
        let loaded = ingest::load_scene(&m1).map_err(|e| e.to_string())?;
        ingest::save_scene(&loaded, &d2).map_err(|e| e.to_string())?;
        files_equal(&d1, &d2).map_err(|e| format!("manifest fixture {i}: {e}"))?;
    }

    let good = ingest::encode_dmap(&DepthMap::filled(2, 2, 1.0));
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"DMAQ");
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let checks: Vec<(&str, bool)> = vec![
        (
            "truncated DMAP",
            matches!(
                ingest::decode_dmap(&good[..good.len() - 2], p),
                Err(IngestError::LengthMismatch { .. })
            ),
        ),
        (
            "padded DMAP",
            matches!(
                ingest::decode_dmap(&[good.as_slice(), &[0]].concat(), p),
                Err(IngestError::LengthMismatch { .. })
            ),
        ),
        (
            "DMAP magic",
            matches!(
                ingest::decode_dmap(&bad_magic, p),
                Err(IngestError::BadMagic { .. })
            ),
        ),
        (
            "DMAP version",
            matches!(
                ingest::decode_dmap(&bad_version, p),
                Err(IngestError::UnsupportedVersion { .. })
            ),
        ),
        (
            "PGM magic",
            matches!(
                ingest::decode_pgm(b"P6\n1 1\n255\n\0", p),
                Err(IngestError::BadMagic { .. })
            ),
        ),
        (
            "PGM depth",
            matches!(
                ingest::decode_pgm(b"P5\n1 1\n1023\n\0\0", p),
                Err(IngestError::MalformedPgm { .. })
            ),
        ),
        (
            "PGM truncated",
            matches!(
                ingest::decode_pgm(b"P5\n3 3\n255\n\0\0", p),
                Err(IngestError::LengthMismatch { .. })
            ),
        ),
        (
            "pose count",
            matches!(
                ingest::decode_pose("1 0 0 0 0 1 0 0 0 0 1 0 0 0 0", p),
                Err(IngestError::MalformedPose { .. })
            ),
        ),
        (
            "pose last row",
            matches!(
                ingest::decode_pose("1 0 0 0 0 1 0 0 0 0 1 0 0 0 1 1", p),
                Err(IngestError::MalformedPose { .. })
            ),
        ),
        (
            "pose rotation",
            matches!(
                ingest::decode_pose("1 0 0 0 0 2 0 0 0 0 1 0 0 0 0 1", p),
                Err(IngestError::NonOrthonormalPose { .. })
            ),
        ),
        (
            "PSET truncated",
            matches!(
                ingest::decode_pset(&ingest::encode_pset(&[Vector3::zeros()])[..15], p),
                Err(IngestError::LengthMismatch { .. })
            ),
        ),
        (
            "labels",
            matches!(
                ingest::decode_labels::<i64>("1\n2.5\n", p),
                Err(IngestError::Labels { line: 2, .. })
            ),
        ),
        (
            "missing manifest",
            matches!(
                ingest::load_scene(&tmp.path().join("absent.json")),
                Err(IngestError::MissingFile { .. })
            ),
        ),
        ("manifest json", {
            let mp = tmp.path().join("broken.json");
            std::fs::write(&mp, "{\"schema_version\": 1").unwrap();
            matches!(ingest::load_scene(&mp), Err(IngestError::Manifest { .. }))
        }),
        ("manifest missing depth", {
            let d = tmp.path().join("a0");
            std::fs::remove_file(d.join("depth/00000.dmap")).unwrap();
            matches!(ingest::load_scene(&d), Err(IngestError::MissingFile { .. }))
        }),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    check(failed.is_empty(), || {
        format!("malformed fixtures without their typed error: {failed:?}")
    })?;
    Ok(format!(
        "50 fixtures byte-identical per format; {} malformed fixtures typed",
        checks.len()
    ))
}

fn constant_echo() -> Outcome {
    let s = SamplerConfig::default();
    let m = MergerConfig::default();
    check(DEFAULT_TAU == 0.25 && s.tau == 0.25, || {
        format!("tau {}", s.tau)
    })?;
    check(DEFAULT_P_FOV == 0.8 && s.p_fov == 0.8, || {
        format!("p_fov {}", s.p_fov)
    })?;
    let layers = vec![
        LayerSel::Encoder,
        LayerSel::Decoder(4),
        LayerSel::Decoder(7),
        LayerSel::Decoder(11),
    ];
    check(m.selected_layers == layers, || {
        format!("layers {:?}", m.selected_layers)
    })?;
    check(m.c_in == 1024 && m.c_mid == 768, || {
        format!("widths {} -> {}", m.c_in, m.c_mid)
    })?;
    let json = serde_json::to_string(&m.selected_layers).map_err(|e| e.to_string())?;
    Ok(format!(
        "tau={} p_fov={} layers={json} widths {}->{}",
        s.tau, s.p_fov, m.c_in, m.c_mid
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("geometry oracle equivalence", geometry_oracle),
        ("FOV sampler correctness", sampler_correctness),
        ("metric oracle equivalence", metric_oracle),
        ("feature merger verification", merger_verification),
        ("end-to-end 3D pipeline", end_to_end_pipeline),
        ("AP protocol sanity", ap_protocol),
        ("format round-trips", format_round_trips),
        ("default constant echo", constant_echo),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Ok(Err(why)) => {
                failures += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
            Err(_) => {
                failures += 1;
                println!("criterion {}: FAIL  {name}: panicked", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
