use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flowtrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtrack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = flowtrack(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    flowtrack(args, cwd).status.code().expect("exit code")
}

/// Every file under `dir`, relative path to contents, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn synth(dir: &Path, suite: &str, frames: usize) {
    ok(
        &[
            "synth",
            "--suite",
            suite,
            "--frames",
            &frames.to_string(),
            "--out",
            "scene",
        ],
        dir,
    );
}

#[test]
fn synth_writes_frames_truth_and_gt() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "S2", 5);
    assert_eq!(
        fs::read_dir(d.path().join("scene/frames")).unwrap().count(),
        5
    );
    assert_eq!(
        fs::read_dir(d.path().join("scene/truth")).unwrap().count(),
        5
    );
    let gt = fs::read_to_string(d.path().join("scene/gt.jsonl")).unwrap();
    assert_eq!(gt.lines().count(), 5);
}

#[test]
fn run_writes_artifacts_and_consistent_manifest() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "S1", 12);
    let stdout = ok(
        &[
            "run",
            "--frames",
            "scene/frames",
            "--gt",
            "scene/gt.jsonl",
            "--out",
            "out",
            "--max-rounds",
            "2",
        ],
        d.path(),
    );
    assert!(stdout.contains("frames/s"));
    let out = d.path().join("out");
    for name in [
        "background.pgm",
        "labels",
        "refined",
        "instances.jsonl",
        "trajectories.csv",
        "overlays",
        "report.json",
        "manifest.json",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let total: f64 = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["ms"].as_f64().unwrap())
        .sum();
    let fps = m["frames"].as_f64().unwrap() / (total / 1000.0);
    assert!((fps - m["fps"].as_f64().unwrap()).abs() <= 1e-9 * fps);
    assert_eq!(m["config"]["refine"]["max_rounds"], 2);
    assert_eq!(m["eval"]["ap50"], 1.0);
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("frame,track_id,cx,cy,w,h,angle,score\n"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "S2", 10);
    for out in ["a", "b"] {
        ok(
            &[
                "run",
                "--frames",
                "scene/frames",
                "--out",
                out,
                "--max-rounds",
                "2",
                "--workers",
                "2",
            ],
            d.path(),
        );
    }
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| {
        t.into_iter()
            .filter(|(p, _)| p != Path::new("manifest.json"))
            .collect::<Vec<_>>()
    };
    let (a, b) = (
        strip(tree(&d.path().join("a"))),
        strip(tree(&d.path().join("b"))),
    );
    assert!(a.len() > 30);
    assert_eq!(a, b);
}

#[test]
fn disabled_refinement_copies_stage1_files() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "S1", 8);
    ok(
        &[
            "run",
            "--frames",
            "scene/frames",
            "--out",
            "out",
            "--no-refine",
        ],
        d.path(),
    );
    let labels = tree(&d.path().join("out/labels"));
    let refined = tree(&d.path().join("out/refined"));
    assert_eq!(labels.len(), 8);
    for ((_, a), (_, b)) in labels.iter().zip(&refined) {
        assert_eq!(a, b);
    }
    assert!(!d.path().join("out/refine_log.csv").exists());
}

#[test]
fn config_file_values_and_flag_overrides() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "S1", 6);
    fs::write(
        d.path().join("cfg.json"),
        r#"{"tracker": {"max_age": 5, "min_hits": 2}, "stages": {"overlays": false}, "refine": {"max_rounds": 1}}"#,
    )
    .unwrap();
    ok(
        &[
            "--config",
            "cfg.json",
            "run",
            "--frames",
            "scene/frames",
            "--out",
            "out",
            "--min-hits",
            "4",
        ],
        d.path(),
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["config"]["tracker"]["max_age"], 5);
    assert_eq!(m["config"]["tracker"]["min_hits"], 4);
    assert!(!d.path().join("out/overlays").exists());
}

#[test]
fn exit_codes_separate_config_from_stage_errors() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.json"), r#"{"tracker": {"max_agee": 3}}"#).unwrap();
    assert_eq!(
        code(&["--config", "bad.json", "run", "--frames", "."], d.path()),
        1
    );
    assert_eq!(code(&["run", "--bogus"], d.path()), 1);
    assert_eq!(code(&["run", "--frames", ".", "--alpha", "2"], d.path()), 1);
    assert_eq!(code(&["run"], d.path()), 1);
    assert_eq!(code(&["synth", "--suite", "S9", "--out", "x"], d.path()), 1);
    assert_eq!(code(&["run", "--frames", "missing"], d.path()), 2);
    fs::create_dir(d.path().join("empty")).unwrap();
    let out = flowtrack(&["label", "--frames", "empty", "--out", "lab"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no frames matched"));
    assert_eq!(code(&["--help"], d.path()), 0);
}

#[test]
fn per_stage_commands_chain() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "S1", 10);
    ok(
        &["bg", "--frames", "scene/frames", "--out", "bg", "--n", "8"],
        p,
    );
    assert!(p.join("bg/background.pgm").exists());
    ok(
        &[
            "label",
            "--frames",
            "scene/frames",
            "--out",
            "lab",
            "--mag-th",
            "0.5",
            "--flow-viz",
            "viz",
        ],
        p,
    );
    assert_eq!(fs::read_dir(p.join("viz")).unwrap().count(), 10);
    ok(
        &[
            "refine",
            "--frames",
            "scene/frames",
            "--labels",
            "lab",
            "--out",
            "ref",
            "--max-rounds",
            "2",
        ],
        p,
    );
    assert!(p.join("ref/refine_log.csv").exists());
    ok(&["extract", "--masks", "ref", "--out", "inst.jsonl"], p);
    assert_eq!(
        code(
            &[
                "track",
                "--instances",
                "inst.jsonl",
                "--out",
                "t.csv",
                "--overlay",
                "ov"
            ],
            p
        ),
        1
    );
    ok(
        &[
            "track",
            "--instances",
            "inst.jsonl",
            "--out",
            "traj.csv",
            "--overlay",
            "ov",
            "--frames",
            "scene/frames",
        ],
        p,
    );
    assert_eq!(fs::read_dir(p.join("ov")).unwrap().count(), 10);
    let traj = fs::read_to_string(p.join("traj.csv")).unwrap();
    let ids: std::collections::BTreeSet<&str> = traj
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ids.len(), 1);
    let report = ok(
        &[
            "eval",
            "--pred",
            "inst.jsonl",
            "--gt",
            "scene/gt.jsonl",
            "--mode",
            "mask",
        ],
        p,
    );
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["ap50"], 1.0);
}

fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

#[test]
fn eval_accepts_coco_ground_truth() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::create_dir(p.join("masks")).unwrap();
    // 8x8 square covering pixels 4..12, the raster of the polygon below
    let data: Vec<u8> = (0..32 * 32)
        .map(|i| {
            if (4..12).contains(&(i % 32)) && (4..12).contains(&(i / 32)) {
                255
            } else {
                0
            }
        })
        .collect();
    write_pgm(&p.join("masks/m0.pgm"), 32, 32, &data);
    ok(
        &[
            "extract",
            "--masks",
            "masks",
            "--out",
            "inst.jsonl",
            "--min-area",
            "1",
        ],
        p,
    );
    let coco = r#"{
        "images": [{"id": 7, "width": 32, "height": 32}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 1, "iscrowd": 0,
                         "bbox": [4, 4, 8, 8], "area": 64,
                         "segmentation": [[4, 4, 12, 4, 12, 12, 4, 12]]}]
    }"#;
    fs::write(p.join("gt.json"), coco).unwrap();
    let report = ok(
        &[
            "eval",
            "--pred",
            "inst.jsonl",
            "--gt",
            "gt.json",
            "--report",
            "r.json",
            "--dump-gt",
            "gt.jsonl",
        ],
        p,
    );
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["ap_mean"], 1.0);
    assert_eq!(
        fs::read_to_string(p.join("gt.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    assert!(p.join("r.json").exists());
}

#[test]
fn ablation_tables() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &[
            "ablate",
            "--suite",
            "S1",
            "--n-frames",
            "6",
            "--variants",
            "",
            "--out",
            "empty.csv",
        ],
        p,
    );
    assert_eq!(
        fs::read_to_string(p.join("empty.csv")).unwrap(),
        "variant,bg_gate,refine,ap_mean,ap50,ap75,ap_large,ar_mean,ar_large,n_pred\n"
    );
    fs::write(p.join("cfg.json"), r#"{"refine": {"max_rounds": 1}}"#).unwrap();
    ok(
        &[
            "--config",
            "cfg.json",
            "ablate",
            "--suite",
            "S1",
            "--n-frames",
            "8",
            "--variants",
            "full,full",
            "--out",
            "twice.csv",
        ],
        p,
    );
    let csv = fs::read_to_string(p.join("twice.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(
        code(
            &[
                "ablate",
                "--suite",
                "S1",
                "--variants",
                "no-flow",
                "--out",
                "x.csv"
            ],
            p
        ),
        1
    );
}
