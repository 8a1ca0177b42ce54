use std::path::Path;
use std::process::{Command, Output};

fn objloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn simulate_small(dir: &Path) {
    let out = objloc(dir, &["simulate", "-o", "data", "--set", "n_frames=10", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    for f in [
        "intrinsics.json",
        "keyframes.jsonl",
        "queries.jsonl",
        "groundtruth.txt",
        "associations.jsonl",
        "scene.json",
        "manifest-simulate.json",
        "config-simulate.conf",
    ] {
        assert!(dir.path().join("data").join(f).is_file(), "{f} missing");
    }
    let gt = std::fs::read_to_string(dir.path().join("data/groundtruth.txt")).unwrap();
    assert_eq!(gt.lines().filter(|l| !l.starts_with('#')).count(), 10);
}

#[test]
fn full_pipeline_produces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    for args in [
        &["build-map", "--dataset", "data"][..],
        &["localize", "--dataset", "data", "--K", "3", "--n-iter", "300"],
        &["evaluate", "--dataset", "data", "--set", "sequence=smoke"],
    ] {
        let out = objloc(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("data/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["sequence"], "smoke");
    assert_eq!(metrics["frames"], 10);
    assert!(metrics["f1"].as_f64().unwrap() > 0.5);
    let csv = std::fs::read_to_string(dir.path().join("data/metrics.csv")).unwrap();
    assert!(csv.starts_with("frame_id,"));
    let results = std::fs::read_to_string(dir.path().join("data/results.jsonl")).unwrap();
    assert!(results.lines().last().unwrap().starts_with("{\"summary\""));
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest-localize.json")).unwrap();
    assert!(manifest.contains("\"K\": \"3\""));
    assert!(manifest.contains("\"n_iter\": \"300\""));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# trial\nK = 2\ntau = 4\nn_frames = 5\n").unwrap();
    let out = objloc(dir.path(), &["simulate", "-o", "d", "--config", "run.conf", "--K", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let conf = std::fs::read_to_string(dir.path().join("d/config-simulate.conf")).unwrap();
    assert!(conf.contains("K = 4\n"));
    assert!(conf.contains("tau = 4\n"));
    assert!(conf.contains("n_frames = 5\n"));

    // The recorded settings reproduce the run.
    let out = objloc(dir.path(), &["simulate", "--config", "d/config-simulate.conf", "-o", "e"]);
    assert_eq!(code(&out), 0);
    for f in ["queries.jsonl", "groundtruth.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("d").join(f)).unwrap(),
            std::fs::read(dir.path().join("e").join(f)).unwrap()
        );
    }
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.conf"), "K = 3\nunknown_key = 1\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["simulate", "-o", "x", "--set", "n_frames=0"],
        &["simulate", "--config", "bad.conf", "-o", "x"],
        &["localize", "--dataset", "missing"],
        &["evaluate"],
        &["frobnicate"],
        &["localize", "--tau", "zero"],
    ];
    for args in cases {
        let out = objloc(p, args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = objloc(p, &["simulate", "--config", "bad.conf", "-o", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.conf:2"));
}

#[test]
fn build_map_requires_associations() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    std::fs::remove_file(dir.path().join("data/associations.jsonl")).unwrap();
    let out = objloc(dir.path(), &["build-map", "--dataset", "data"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("associations.jsonl"));
}

#[test]
fn help_and_version_exit_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["localize", "--help"]] {
        let out = objloc(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn sweep_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    let out = objloc(
        dir.path(),
        &["localize", "--dataset", "data", "--sweep", "K=1,3", "--sweep", "tau=2,3", "-o", "sw"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("K,tau,frames,"));
    assert!(lines[1].starts_with("1,2,10,"));
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("sw/sweep.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["variants"].as_array().unwrap().len(), 4);
}

#[test]
fn empty_query_log_gives_summary_only() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    std::fs::write(dir.path().join("data/queries.jsonl"), "").unwrap();
    assert_eq!(code(&objloc(dir.path(), &["build-map", "--dataset", "data"])), 0);
    let out = objloc(dir.path(), &["localize", "--dataset", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(dir.path().join("data/results.jsonl")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("{\"summary\""));
    assert_eq!(code(&objloc(dir.path(), &["evaluate", "--dataset", "data"])), 1);
}
