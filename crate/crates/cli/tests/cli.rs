//! End-to-end checks of the `sdrl` binary: printed values, exit codes, files.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn sdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdrl")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn printed_value(args: &[&str]) -> f64 {
    let o = sdrl(args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    stdout(&o).parse().unwrap()
}

/// Short chain run used by the file-level tests.
const SHORT_CHAIN: &str = r#"
seed = 5

[mdp]
kind = "chain"
gamma = 0.9
n_states = 5
slip = 0.1

[agent]
n_particles = 8
optimizer = "sgd"
learning_rate = 0.05
buffer_capacity = 2000
total_steps = 2000
eval_interval = 500
eval_episodes = 5

[divergence]
kind = "energy"
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn divergence_examples() {
    let v = printed_value(&["divergence", "--kind", "sinkhorn", "--eps", "10", "--alpha", "2", "--x", "0,1", "--y", "0,1"]);
    assert!(v.abs() <= 1e-9, "{v}");
    let v = printed_value(&["divergence", "--kind", "w1", "--x", "0", "--y", "3"]);
    assert!((v - 3.0).abs() <= 1e-12);
    let v = printed_value(&["divergence", "--kind", "mmd", "--bandwidths", "1", "--x", "0", "--y", "1"]);
    assert!((v - 1.264241117657).abs() <= 1e-9, "{v}");
}

#[test]
fn divergence_prints_twelve_decimals() {
    let o = sdrl(&["divergence", "--kind", "w1", "--x", "0", "--y", "3"]);
    assert_eq!(stdout(&o), "3.000000000000");
}

#[test]
fn inline_lists_accept_negative_values() {
    let v = printed_value(&["divergence", "--kind", "w1", "--x", "-1,-2", "--y", "1,2"]);
    assert!((v - 3.0).abs() <= 1e-12);
}

#[test]
fn particle_files_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.json");
    std::fs::write(&x, r#"{"values": [0.0, 2.0], "weights": [0.25, 0.75]}"#).unwrap();
    let y = dir.path().join("y.json");
    std::fs::write(&y, "[0.0]").unwrap();
    let v = printed_value(&["divergence", "--kind", "w1", "--x", x.to_str().unwrap(), "--y", y.to_str().unwrap()]);
    assert!((v - 1.5).abs() <= 1e-12);
}

#[test]
fn malformed_particles_exit_2() {
    let o = sdrl(&["divergence", "--kind", "w1", "--x", "0,abc", "--y", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("0,abc"));
    let o = sdrl(&["divergence", "--kind", "energy", "--x", "", "--y", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_json_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.json");
    std::fs::write(&x, r#"{"values": [0.0, 1.0], "weights": [0.9, 0.9]}"#).unwrap();
    let o = sdrl(&["divergence", "--kind", "w1", "--x", x.to_str().unwrap(), "--y", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(sdrl(&["divergence", "--kind", "w1", "--x", "0", "--y", "1", "--bogus"]).status.code(), Some(2));
}

#[test]
fn solver_failure_exits_3() {
    let o = sdrl(&["divergence", "--kind", "sinkhorn", "--eps", "1e-320", "--x", "0,1", "--y", "5,30"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("sinkhorn solver failed"));
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SHORT_CHAIN}\nextra = 1\n[exploration]\nepsilon_start = 1.0\n"));
    let o = sdrl(&["--out", dir.path().join("out").to_str().unwrap(), "train", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("extra") && err.contains("exploration.epsilon_start"), "{err}");
}

#[test]
fn missing_gamma_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SHORT_CHAIN.replace("gamma = 0.9\n", ""));
    let o = sdrl(&["--out", dir.path().join("out").to_str().unwrap(), "train", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mdp.gamma"));
}

#[test]
fn training_abort_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SHORT_CHAIN.replace("learning_rate = 0.05", "learning_rate = 1e6"));
    let o = sdrl(&["--out", dir.path().join("out").to_str().unwrap(), "train", &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_writes_listed_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_CHAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sdrl(&["--out", out.to_str().unwrap(), "train", &cfg]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(a.join("curve.csv")).unwrap(), std::fs::read(b.join("curve.csv")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o == "curve.csv"));
    for o in outputs {
        assert!(a.join(o.as_str().unwrap()).exists());
    }
    let header = std::fs::read_to_string(a.join("curve.csv")).unwrap();
    assert!(header.starts_with("step,mean_return,loss,sup_q_err\n"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_CHAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    sdrl(&["--out", a.to_str().unwrap(), "train", &cfg]);
    sdrl(&["--seed", "6", "--out", b.to_str().unwrap(), "train", &cfg]);
    assert_ne!(std::fs::read(a.join("curve.csv")).unwrap(), std::fs::read(b.join("curve.csv")).unwrap());
}

#[test]
fn contract_w1_example() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdrl(&[
        "--out",
        dir.path().to_str().unwrap(),
        "contract",
        "--divergence",
        "w1",
        "--gamma",
        "0.9",
        "--trials",
        "200",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["config"]["max_ratio"].as_f64().unwrap() <= 0.9 + 1e-9);
    assert_eq!(manifest["passed"], true);
    let rows = std::fs::read_to_string(dir.path().join("contraction.csv")).unwrap().lines().count();
    assert_eq!(rows, 201);
}

#[test]
fn plan_example_emits_three_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdrl(&["--out", dir.path().to_str().unwrap(), "plan", "--eps", "0.05,0.5,5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svgs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 3);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn plan_bound_violation_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdrl(&["--out", dir.path().to_str().unwrap(), "plan", "--eps", "0.5,0.5", "--n-points", "8"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], false);
}

#[test]
fn sweep_example_shape() {
    let dir = tempfile::tempdir().unwrap();
    let sinkhorn = SHORT_CHAIN.replace(
        "kind = \"energy\"",
        "kind = \"sinkhorn\"\nepsilon = 10.0\niterations = 5\nlog_domain = false",
    );
    let cfg = write_config(dir.path(), &sinkhorn.replace("total_steps = 2000", "total_steps = 300"));
    let out = dir.path().join("out");
    let o = sdrl(&[
        "--threads",
        "2",
        "--out",
        out.to_str().unwrap(),
        "sweep",
        &cfg,
        "--param",
        "epsilon",
        "--values",
        "1,10,100,500",
        "--replications",
        "2",
        "--threshold",
        "1000",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
}

#[test]
fn sweep_below_threshold_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SHORT_CHAIN.replace("total_steps = 2000", "total_steps = 500"));
    let out = dir.path().join("out");
    let o = sdrl(&["--out", out.to_str().unwrap(), "sweep", &cfg, "--param", "lr", "--values", "0.01", "--threshold", "1e-9"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn moments_prints_series_value() {
    let dir = tempfile::tempdir().unwrap();
    let v = printed_value(&["--out", dir.path().to_str().unwrap(), "moments", "--x", "0,1", "--y", "-1,0.5"]);
    let direct = sdrl_core::divergence::mmd_squared(
        &sdrl_core::ParticleSet::uniform(vec![0.0, 1.0]).unwrap(),
        &sdrl_core::ParticleSet::uniform(vec![-1.0, 0.5]).unwrap(),
        &sdrl_core::divergence::CostSpec::gaussian(vec![2.0]),
    )
    .unwrap();
    assert!((v - direct).abs() < 1e-9);
    assert!(dir.path().join("moments.csv").exists());
}

#[test]
fn bundled_configs_parse() {
    for name in ["chain5_sinkhorn.toml", "chain5_mmd.toml", "chain5_energy.toml", "three_state_eval.toml"] {
        let path = common::config_path(name);
        let cfg = sdrl_cli::config::RunConfig::load(&path).unwrap();
        let mdp = cfg.build_mdp(path.parent().unwrap()).unwrap();
        cfg.agent_config(&mdp, None).unwrap();
    }
}
