use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SUBCOMMANDS: [&str; 8] = ["simulate", "crop", "calibrate", "localize", "merge", "evaluate", "pipeline", "ablation"];

fn crowdloc(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crowdloc"));
    cmd.current_dir(dir).args(args).env_remove("CROWDLOC_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a small noiseless scene and returns its directory.
fn scene(people: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let spec = serde_json::json!({
        "seed": 3,
        "person_count": people,
        "keypoint_noise": 0.0,
        "stature_range": [1.7, 1.7],
        "max_yaw_deg": 0.0
    });
    fs::write(dir.path().join("spec.json"), spec.to_string()).unwrap();
    let o = crowdloc(dir.path(), &["simulate", "--spec", "spec.json", "--out-annotations", "a.json", "--out-truth", "t.json"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn every_subcommand_has_help() {
    let dir = TempDir::new().unwrap();
    for sub in SUBCOMMANDS {
        let o = crowdloc(dir.path(), &[sub, "--help"], &[]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("Usage: crowdloc"), "{sub}: {text}");
        assert!(text.contains("--workers"), "{sub} lacks the worker flag");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(crowdloc(dir.path(), &[], &[]).status.code(), Some(2));
    assert_eq!(crowdloc(dir.path(), &["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(crowdloc(dir.path(), &["merge", "--out", "x.json"], &[]).status.code(), Some(2));
}

#[test]
fn missing_input_names_the_path() {
    let dir = TempDir::new().unwrap();
    let o = crowdloc(dir.path(), &["pipeline", "--annotations", "absent.json", "--out-dir", "out"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));
}

#[test]
fn malformed_input_exits_4() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("a.json"), "{ not json").unwrap();
    let o = crowdloc(dir.path(), &["calibrate", "--annotations", "a.json", "--out", "s.json"], &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("a.json"));
}

#[test]
fn infeasible_layout_exits_11() {
    let dir = TempDir::new().unwrap();
    let params = r#"{"top_height":100,"bottom_height":200,"upper_bound":0,"lower_bound":50,"image_width":1000,"image_height":1000}"#;
    fs::write(dir.path().join("p.json"), params).unwrap();
    let o = crowdloc(dir.path(), &["crop", "--params", "p.json", "--out", "x.json"], &[]);
    assert_eq!(o.status.code(), Some(11), "{}", stderr(&o));
}

#[test]
fn too_few_people_exits_12() {
    let dir = scene(2);
    let o = crowdloc(dir.path(), &["calibrate", "--annotations", "a.json", "--out", "s.json"], &[]);
    assert_eq!(o.status.code(), Some(12), "{}", stderr(&o));
    let o = crowdloc(dir.path(), &["pipeline", "--annotations", "a.json", "--out-dir", "out"], &[]);
    assert_eq!(o.status.code(), Some(12));
    assert!(stderr(&o).contains("calibrate stage failed"), "{}", stderr(&o));
}

#[test]
fn bad_worker_settings_exit_2() {
    let dir = scene(20);
    let args = ["pipeline", "--annotations", "a.json", "--out-dir", "out"];
    assert_eq!(crowdloc(dir.path(), &args, &[("CROWDLOC_WORKERS", "zero")]).status.code(), Some(2));
    let mut with_flag = args.to_vec();
    with_flag.extend(["--workers", "0"]);
    assert_eq!(crowdloc(dir.path(), &with_flag, &[]).status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = scene(120);
    let base = ["pipeline", "--annotations", "a.json", "--truth", "t.json", "--out-dir"];
    let runs: [(&str, Vec<&str>, Vec<(&str, &str)>); 4] = [
        ("w1", vec!["--workers", "1"], vec![]),
        ("w4", vec!["--workers", "4"], vec![]),
        ("env3", vec![], vec![("CROWDLOC_WORKERS", "3")]),
        ("flag_wins", vec!["--workers", "2"], vec![("CROWDLOC_WORKERS", "7")]),
    ];
    for (name, extra, env) in &runs {
        let mut args = base.to_vec();
        args.push(name);
        args.extend(extra);
        let o = crowdloc(dir.path(), &args, env);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
    for file in ["patches.json", "scene.json", "reconstruction.json", "report.json", "log.json"] {
        let reference = fs::read(dir.path().join("w1").join(file)).unwrap();
        for (name, _, _) in &runs[1..] {
            assert_eq!(fs::read(dir.path().join(name).join(file)).unwrap(), reference, "{name}/{file}");
        }
    }
}

#[test]
fn stages_reproduce_the_pipeline_and_close_at_zero_noise() {
    let dir = scene(80);
    let p = dir.path();
    let steps: [&[&str]; 5] = [
        &["crop", "--annotations", "a.json", "--out", "p.json"],
        &["calibrate", "--annotations", "a.json", "--height-prior", "1.294", "--out", "s.json"],
        &["localize", "--scene", "s.json", "--annotations", "a.json", "--patches", "p.json", "--out", "r.json"],
        &["merge", "--in", "r.json", "--out", "m.json"],
        &["evaluate", "--est", "m.json", "--gt", "t.json", "--out", "rep.json"],
    ];
    for args in steps {
        let o = crowdloc(p, args, &[]);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("rep.json")).unwrap()).unwrap();
    assert_eq!(report["matched"], 80);
    assert!(report["ppds"]["value"].as_f64().unwrap() > 1.0 - 1e-6, "{report}");
    assert_eq!(report["provenance"]["tool"], "crowdloc");
    let patches: serde_json::Value = serde_json::from_slice(&fs::read(p.join("p.json")).unwrap()).unwrap();
    for key in ["id", "x", "y", "size", "overlap"] {
        assert!(patches["patches"][0].get(key).is_some(), "patch lacks {key}");
    }

    let config = serde_json::json!({ "calibration": { "height_prior": 1.294 } });
    fs::write(p.join("config.json"), config.to_string()).unwrap();
    let o = crowdloc(p, &["pipeline", "--annotations", "a.json", "--config", "config.json", "--out-dir", "out"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let staged: serde_json::Value = serde_json::from_slice(&fs::read(p.join("m.json")).unwrap()).unwrap();
    let whole: serde_json::Value = serde_json::from_slice(&fs::read(p.join("out/reconstruction.json")).unwrap()).unwrap();
    assert_eq!(staged["people"], whole["people"]);
}

#[test]
fn ablation_writes_one_row_per_count() {
    let dir = TempDir::new().unwrap();
    let spec = serde_json::json!({ "counts": [3, 5, 8], "seeds": 2 });
    fs::write(dir.path().join("sweep.json"), spec.to_string()).unwrap();
    let o = crowdloc(dir.path(), &["ablation", "--spec", "sweep.json", "--out", "curve.csv"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# crowdloc"));
    assert_eq!(lines[1], "count,normal_cosine_distance,focal_rmse_px,runs,failures");
    assert_eq!(lines.len(), 2 + 3);
    assert!(lines[2].starts_with("3,"));

    let o = crowdloc(dir.path(), &["ablation", "--spec", "sweep.json", "--seeds", "1", "--out", "curve.json"], &[]);
    assert!(o.status.success());
    let table: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("curve.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
    assert_eq!(table["spec"]["seeds"], 1);
}
