use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn geovos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geovos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = geovos(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(text: &[u8]) -> Vec<Value> {
    std::str::from_utf8(text)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn aggregate(path: &Path) -> Value {
    lines(&std::fs::read(path).unwrap()).pop().unwrap()["data"].clone()
}

fn synth(dir: &Path) -> String {
    let scene = dir.join("scene");
    ok(&[
        "synth",
        "--out",
        scene.to_str().unwrap(),
        "--size",
        "32",
        "--report",
        dir.join("synth.jsonl").to_str().unwrap(),
    ]);
    scene.to_str().unwrap().to_owned()
}

#[test]
fn seeded_sample_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "sample",
            "--scene",
            &scene,
            "--n",
            "3",
            "--draws",
            "4",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        std::fs::read(out).unwrap()
    };
    let a = run("a.jsonl");
    assert_eq!(a, run("b.jsonl"));
    let header = &lines(&a)[0];
    assert_eq!(header["schema"], "geovos.report/1");
    assert_eq!(header["config"]["sampler"]["tau"], 0.25);
}

#[test]
fn bad_scene_path_is_input_error() {
    let out = geovos(&["sample", "--scene", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not/here"));
}

#[test]
fn bad_thread_count_is_input_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_geovos"))
        .args(["gradcheck"])
        .env("GEOVOS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_on_two_cubes_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let report = dir.path().join("p.jsonl");
    let inst = dir.path().join("inst.json");
    ok(&[
        "pipeline",
        "--scene",
        &scene,
        "--masks",
        &format!("{scene}/masks"),
        "--instances-out",
        inst.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let agg = aggregate(&report);
    assert_eq!(agg["instances"], 2);
    assert_eq!(agg["ap"]["ap"], 1.0);

    let eval = dir.path().join("e.jsonl");
    ok(&[
        "eval-3d",
        "--scene",
        &scene,
        "--pred",
        inst.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(aggregate(&eval)["ap"]["ap50"], 1.0);
}

#[test]
fn empty_mask_dir_gives_no_instances() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let report = dir.path().join("p.jsonl");
    ok(&[
        "pipeline",
        "--scene",
        &scene,
        "--masks",
        empty.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let agg = aggregate(&report);
    assert_eq!(agg["instances"], 0);
    assert_eq!(agg["ap"]["ap"], 0.0);
}

#[test]
fn eval_vos_prediction_equal_to_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let gt = format!("{scene}/gt_tracks");
    let report = dir.path().join("v.jsonl");
    ok(&[
        "eval-vos",
        "--pred",
        &gt,
        "--gt",
        &gt,
        "--lmin",
        "1",
        "--segmin",
        "1",
        "--out",
        report.to_str().unwrap(),
    ]);
    let agg = aggregate(&report);
    for set in ["whole_set", "selected_subset"] {
        for m in ["iou", "positive_iou", "successful_iou"] {
            assert_eq!(agg[set][m], 1.0, "{set}.{m}");
        }
    }
}

#[test]
fn eval_vos_length_mismatch_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let other = dir.path().join("other");
    ok(&[
        "synth",
        "--out",
        other.to_str().unwrap(),
        "--size",
        "32",
        "--layout",
        "random",
        "--boxes",
        "2",
        "--report",
        dir.path().join("r.jsonl").to_str().unwrap(),
    ]);
    // random layout uses the same six cameras, so stretch the truth instead
    let tracks = geovos_core::ingest::load_track_set(&other.join("gt_tracks")).unwrap();
    let mut longer = tracks.clone();
    for t in &mut longer {
        t.track.frames.push(None);
    }
    let long_dir = dir.path().join("long");
    geovos_core::ingest::save_track_set(&long_dir, &longer).unwrap();
    let out = geovos(&[
        "eval-vos",
        "--pred",
        &format!("{scene}/gt_tracks"),
        "--gt",
        long_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("merger.json");
    // small raster keeps the finite differences quick
    std::fs::write(
        &cfg,
        r#"{"c_in": 6, "c_mid": 4, "c_dec": 4, "c_f2d": 2, "c_out": 2, "heads": 2}"#,
    )
    .unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let base = [
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--height",
        "2",
        "--width",
        "2",
        "--seed",
        "3",
    ];
    ok(&[&base[..], &["--out", a.to_str().unwrap()]].concat());
    ok(&[&base[..], &["--out", b.to_str().unwrap()]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(aggregate(&a)["passed"], true);

    let out = geovos(
        &[
            &base[..],
            &[
                "--inject-fault",
                "softmax-backward",
                "--out",
                a.to_str().unwrap(),
            ],
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(aggregate(&a)["passed"], false);
}

#[test]
fn unknown_config_field_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("merger.json");
    std::fs::write(&cfg, r#"{"c_mdi": 4}"#).unwrap();
    assert_eq!(
        geovos(&["gradcheck", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}
