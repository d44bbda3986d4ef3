use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn posoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posoc")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

const TINY: &str = r#"{
  "id": "tiny", "kind": "lqg",
  "a": [[-0.25]], "b": [[1.0]], "c": [[1.0]], "sigma": [[0.5]],
  "q": [[2.0]], "r": [[2.0]], "q_t": [[2.0]], "m0": [0.0], "sigma0": [[1.0]],
  "fixed_eps": 0.1, "n_obs": 2, "sweep_n_obs": [1, 2],
  "training": {"m_train": 150, "dt": 0.05, "n_outer": 3},
  "evaluation": {"m_eval": 2000, "n_trajectories": 3}
}"#;

const TINY_OBSTACLE: &str = r#"{
  "id": "tiny_obstacle", "kind": "obstacle",
  "a": [[0.0]], "b": [[1.0]], "c": [[1.0]], "sigma": [[0.5]],
  "q": [[0.0]], "r": [[2.0]], "q_t": [[20.0]], "m0": [0.0], "sigma0": [[1.0]],
  "fixed_eps": 0.1, "obs_times": [0.5], "alpha_bound": 20.0,
  "obstacle": {"t_min": 0.3, "t_max": 0.6, "r_in": 0.1, "r_out": 2.0, "magnitude": 1000.0, "x_star": [0.0]},
  "training": {"m_train": 150, "dt": 0.05, "n_outer": 3, "proximal": 10.0},
  "evaluation": {"m_eval": 1000, "n_trajectories": 2}
}"#;

fn write_scenario(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn missing_scenario_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o").display().to_string();
    let o = posoc(&["table1", "--scenario", "/nonexistent/x.json", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    let o = posoc(&["table1", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(posoc(&["table1", "--bogus"]).status.code(), Some(1));
    assert_eq!(posoc(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_scenario_reports_location() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "bad.json", "{\n  \"id\": \"x\",\n  \"kind\": 3\n}");
    let out = tmp.path().join("o").display().to_string();
    let o = posoc(&["train", "--scenario", &s, "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn noise_study_needs_a_beta_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("o").display().to_string();
    assert_eq!(posoc(&["noise-study", "--scenario", &s, "--out", &out]).status.code(), Some(1));
}

#[test]
fn oracle_instance_passes_and_dumps_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let inst = repo("scenarios/oracle/two_state.json").display().to_string();
    let o = posoc(&["oracle", "--scenario", &inst, "--out", &out.display().to_string()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "oracle.csv", "policy_tree_two_state.json", "run.log"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn broken_oracle_instance_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = repo("crates/core/tests/data/broken_emissions.json").display().to_string();
    let o = posoc(&["oracle", "--scenario", &inst, "--out", &tmp.path().display().to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("emissions[1][0]"));
}

#[test]
fn table1_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "tiny.json", TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = posoc(&["table1", "--scenario", &s, "--seed", "7", "--out", &a.display().to_string()]);
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = posoc(&["table1", "--scenario", &s, "--seed", "7", "--out", &b.display().to_string(), "--threads", "1"]);
    assert_eq!(ob.status.code(), Some(0));
    let (ca, cb) = (csvs(&a), csvs(&b));
    assert!(ca.iter().any(|(n, _)| n == "costs.csv"));
    assert_eq!(ca, cb);

    let c = tmp.path().join("c");
    posoc(&["table1", "--scenario", &s, "--seed", "8", "--out", &c.display().to_string()]);
    let cost = |d: &Path| std::fs::read(d.join("costs.csv")).unwrap();
    assert_ne!(cost(&a), cost(&c));

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 4);
    assert_eq!(report["reports"][0]["train_seed"], serde_json::Value::Null);
    assert_eq!(report["reports"][1]["train_seed"], 7);
}

#[test]
fn train_evaluate_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("o");
    let od = out.display().to_string();
    assert_eq!(posoc(&["train", "--scenario", &s, "--out", &od]).status.code(), Some(0));
    assert!(out.join("ansatz.json").exists() && out.join("policy.json").exists() && out.join("training.csv").exists());

    let o = posoc(&["evaluate", "--scenario", &s, "--out", &od]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let costs = std::fs::read_to_string(out.join("costs.csv")).unwrap();
    assert!(costs.lines().nth(1).unwrap().starts_with("tiny,2,policy,"));

    let o = posoc(&["export-ansatz", "--out", &od]);
    assert_eq!(o.status.code(), Some(0));
    let coef = std::fs::read_to_string(out.join("ansatz_coefficients.csv")).unwrap();
    assert!(coef.starts_with("node,t,kind,feature,coefficient\n"));
    assert!(coef.contains(",pre,"));

    // A policy trained on another horizon is rejected.
    let other = write_scenario(tmp.path(), "other.json", &TINY.replace("\"id\": \"tiny\",", "\"id\": \"tiny\", \"horizon\": 2.0,"));
    assert_eq!(posoc(&["evaluate", "--scenario", &other, "--out", &od]).status.code(), Some(1));
}

#[test]
fn obstacle_writes_occupancy_and_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "ob.json", TINY_OBSTACLE);
    let out = tmp.path().join("o");
    let o = posoc(&["obstacle", "--scenario", &s, "--out", &out.display().to_string()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let occ = std::fs::read_to_string(out.join("occupancy.csv")).unwrap();
    assert_eq!(occ.lines().count(), 3);
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    // two methods, two paths, 21 nodes each
    assert_eq!(traj.lines().count(), 1 + 2 * 2 * 21);
}
