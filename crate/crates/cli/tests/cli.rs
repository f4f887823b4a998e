//! Drives the `rcbev` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn rcbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcbev")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SCENE_SPEC: &str = r#"{ "cameras": 2, "feature_channels": 8, "lidar_density": 5000, "radar_density": 800 }"#;
const PIPELINE: &str = r#"{
  "depth": { "bins": 28, "context_channels": 8 },
  "bev": { "x_range": [-51.2, 51.2], "y_range": [-51.2, 51.2], "nx": 32, "ny": 32 }
}"#;

/// Writes the small configs and a generated bundle; returns the temp dir.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), SCENE_SPEC).unwrap();
    std::fs::write(dir.path().join("pipeline.json"), PIPELINE).unwrap();
    let out = rcbev(&[
        "gen",
        "--config",
        path(&dir.path().join("spec.json")),
        "--seed",
        "11",
        "--out",
        path(&dir.path().join("scene")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn run(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let (scene, config, out_dir) = (dir.join("scene"), dir.join("pipeline.json"), dir.join(out));
    let mut args = vec!["run", "--scene", path(&scene), "--config", path(&config), "--out", path(&out_dir)];
    args.extend(extra);
    rcbev(&args)
}

#[test]
fn gen_is_deterministic() {
    let dir = setup();
    let again = rcbev(&[
        "gen",
        "--config",
        path(&dir.path().join("spec.json")),
        "--seed",
        "11",
        "--out",
        path(&dir.path().join("scene2")),
    ]);
    assert_eq!(code(&again), 0);
    for f in ["scene.json", "lidar.pc4d", "radar.pc4d", "gt.json", "features_f0.tnsr", "features_f1.tnsr"] {
        assert_eq!(
            std::fs::read(dir.path().join("scene").join(f)).unwrap(),
            std::fs::read(dir.path().join("scene2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sequential_runs_write_identical_predictions() {
    let dir = setup();
    for out in ["r1", "r2"] {
        let o = run(dir.path(), out, &["--sequential"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("r1/predictions.json")).unwrap();
    let b = std::fs::read(dir.path().join("r2/predictions.json")).unwrap();
    assert_eq!(a, b);

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r1/report.json")).unwrap()).unwrap();
    assert_eq!(report["sequential"], true);
    assert_eq!(report["workers"], 1);
    assert!(report["checksums"]["f_bev"].is_string());
    assert!(report["summary"]["nds"].is_number());
}

#[test]
fn camera_only_run_has_no_radar_section() {
    let dir = setup();
    let o = run(dir.path(), "cam", &["--modality", "camera", "--pooling", "concurrent", "--workers", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("cam/report.json")).unwrap()).unwrap();
    assert!(report["radar"].is_null());
    assert_eq!(report["modality"], "camera");
    assert_eq!(report["pooling"], "concurrent");
}

#[test]
fn eval_round_trips_and_rejects_bad_input() {
    let dir = setup();
    assert_eq!(code(&run(dir.path(), "r", &[])), 0);
    let gt = dir.path().join("scene/gt.json");
    let pred = dir.path().join("r/predictions.json");
    let s1 = dir.path().join("s1.json");
    let s2 = dir.path().join("s2.json");
    for s in [&s1, &s2] {
        let o = rcbev(&["eval", "--pred", path(&pred), "--gt", path(&gt), "--out", path(s)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("NDS"));
    }
    let strip = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("eval_time");
        v
    };
    assert_eq!(strip(&s1), strip(&s2));

    // No predictions at all: mAP is zero.
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"results": {}}"#).unwrap();
    let o = rcbev(&["eval", "--pred", path(&empty), "--gt", path(&gt), "--out", path(&s1)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&s1).unwrap()).unwrap();
    assert_eq!(v["map"], 0.0);

    // Tokens the ground truth does not know are a validation failure.
    let stray = dir.path().join("stray.json");
    std::fs::write(&stray, r#"{"results": {"no-such-sample": []}}"#).unwrap();
    assert_eq!(code(&rcbev(&["eval", "--pred", path(&stray), "--gt", path(&gt)])), 1);

    // Unreadable input is an I/O failure.
    assert_eq!(code(&rcbev(&["eval", "--pred", path(&dir.path().join("nope.json")), "--gt", path(&gt)])), 2);
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = setup();
    assert_eq!(code(&rcbev(&["check-tables"])), 0);
    assert_eq!(code(&run(dir.path(), "x", &["--pooling", "bogus"])), 1);
    assert_eq!(code(&run(dir.path(), "x", &["--workers", "0"])), 1);
    assert_eq!(code(&rcbev(&["run", "--scene", path(&dir.path().join("missing")), "--out", path(&dir.path().join("x"))])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"depth": {"bins": 0}}"#).unwrap();
    let o = rcbev(&[
        "run",
        "--scene",
        path(&dir.path().join("scene")),
        "--config",
        path(&bad),
        "--out",
        path(&dir.path().join("x")),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&rcbev(&["frobnicate"])), 1);
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = rcbev(&["bench", "--points", "2000,4000", "--channels", "4", "--reps", "1", "--out", path(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "impl,M,C,nx,ny,workers,seconds");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
}
