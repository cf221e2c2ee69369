use std::path::Path;
use std::process::{Command, Output};

fn skytrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skytrack")).args(args).output().expect("spawn skytrack")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn events(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("non-JSON log line {l:?}: {e}")))
        .collect()
}

#[test]
fn synth_reconstruct_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("out");
    let o = skytrack(&["synth", "--preset", "stationary", "--seed", "3", "--output-dir", s(&scene)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["detections.jsonl", "calibration.json", "map.geojson", "prior.json"] {
        assert!(scene.join(f).exists(), "missing {f}");
    }

    let o = skytrack(&[
        "reconstruct",
        "--detections", s(&scene.join("detections.jsonl")),
        "--reference-tracks", s(&scene.join("reference_tracks.jsonl")),
        "--calibration", s(&scene.join("calibration.json")),
        "--map", s(&scene.join("map.geojson")),
        "--prior", s(&scene.join("prior.json")),
        "--output-dir", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev = events(&o);
    assert_eq!(ev.last().unwrap()["event"], "reconstruct_done");
    assert!(out.join("trajectories.jsonl").exists());
    assert!(out.join("diagnostics.jsonl").exists());

    let o = skytrack(&[
        "score",
        "--truth", s(&scene.join("ground_truth.json")),
        "--trajectories", s(&out.join("trajectories.jsonl")),
    ]);
    assert!(o.status.success());
    let headline: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(headline["id_switches"], 0);
    assert!(headline["position_mean_m"].as_f64().unwrap() < 0.01);
}

#[test]
fn reconstruct_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert!(skytrack(&["synth", "--preset", "stationary", "--sigma", "1.5", "--output-dir", s(&scene)]).status.success());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = skytrack(&[
            "--quiet", "reconstruct",
            "--detections", s(&scene.join("detections.jsonl")),
            "--calibration", s(&scene.join("calibration.json")),
            "--prior", s(&scene.join("prior.json")),
            "--output-dir", s(&out),
            "--seed", "11",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("trajectories.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn build_prior_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let prior = dir.path().join("prior.json");
    let o = skytrack(&["build-prior", "--fleet-count", "40", "--k", "3", "--output", s(&prior)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p: serde_json::Value = serde_json::from_slice(&std::fs::read(&prior).unwrap()).unwrap();
    assert!(p.is_object());

    let scene = dir.path().join("scene");
    assert!(skytrack(&["synth", "--preset", "stationary", "--output-dir", s(&scene)]).status.success());
    let poses = dir.path().join("poses.jsonl");
    let o = skytrack(&[
        "calibrate",
        "--calibration", s(&scene.join("calibration.json")),
        "--reference-tracks", s(&scene.join("reference_tracks.jsonl")),
        "--output", s(&poses),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = std::fs::read_to_string(&poses).unwrap().lines().count();
    assert_eq!(n, 61);
}

#[test]
fn analyze_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("out");
    assert!(skytrack(&["synth", "--preset", "intersection", "--output-dir", s(&scene)]).status.success());
    assert!(skytrack(&[
        "--quiet", "reconstruct",
        "--detections", s(&scene.join("detections.jsonl")),
        "--reference-tracks", s(&scene.join("reference_tracks.jsonl")),
        "--calibration", s(&scene.join("calibration.json")),
        "--map", s(&scene.join("map.geojson")),
        "--prior", s(&scene.join("prior.json")),
        "--output-dir", s(&out),
    ])
    .status
    .success());
    let cfg = dir.path().join("analytics.json");
    std::fs::write(
        &cfg,
        r#"{"speed_segments": ["W_in_1"], "pet_zones": ["box"], "rules": [{"kind": "speed_above_limit", "limit": 30.0}]}"#,
    )
    .unwrap();
    let report = dir.path().join("report");
    let o = skytrack(&[
        "analyze",
        "--trajectories", s(&out.join("trajectories.jsonl")),
        "--map", s(&scene.join("map.geojson")),
        "--config", s(&cfg),
        "--output-dir", s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "counts.csv", "speeds.csv", "ttc_series.csv", "pet.csv", "incidents.csv"] {
        assert!(report.join(f).exists(), "missing {f}");
    }
}

#[test]
fn suite_writes_scorecard() {
    let dir = tempfile::tempdir().unwrap();
    let o = skytrack(&["suite", "--output-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("scorecard.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    // Usage error.
    assert_eq!(skytrack(&["reconstruct", "--bogus"]).status.code(), Some(1));
    // Missing required path in the config.
    assert_eq!(skytrack(&["reconstruct"]).status.code(), Some(1));
    // Missing input file.
    let missing = dir.path().join("nope.json");
    assert_eq!(skytrack(&["build-prior", "--models", s(&missing), "--output", s(&dir.path().join("p.json"))]).status.code(), Some(1));
    // Malformed data.
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let o = skytrack(&["build-prior", "--models", s(&bad), "--output", s(&dir.path().join("p.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let ev = events(&o);
    assert_eq!(ev.last().unwrap()["event"], "error");
    assert_eq!(ev.last().unwrap()["kind"], "data");
    assert_eq!(skytrack(&["--help"]).status.code(), Some(0));
}
