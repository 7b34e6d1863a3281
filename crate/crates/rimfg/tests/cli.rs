use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn rimfg(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rimfg"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RIMFG_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn manifests_in(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("manifest"))
        .count()
}

#[test]
fn missing_config_exits_nonzero_naming_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = rimfg(&["--config", "/no/such/config.json", "--out", out.to_str().unwrap(), "validate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("ParseError"), "{}", text(&o));
}

#[test]
fn solvable_leader_run_writes_manifest_with_recomputable_digest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("leader");
    let o = rimfg(&["--out", out.to_str().unwrap(), "solve-leader", "--gamma", "10000"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(manifests_in(&out), 1);
    let m = manifest(&out);
    assert_eq!(m["status"], "OK");
    assert_eq!(m["subcommand"], "solve-leader");
    let config = std::fs::read(out.join(m["config_file"].as_str().unwrap())).unwrap();
    assert_eq!(m["config_digest"], hex::encode(Sha256::digest(&config)));
    for f in m["outputs"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists(), "{f} listed but missing");
    }
    let header = std::fs::read_to_string(out.join("riccati_p.csv")).unwrap();
    assert!(header.starts_with("t,P1,Pi1,P2,Pi2\n"));
    let rows = header.lines().count();
    assert_eq!(rows, 1 + 1001);
}

#[test]
fn below_critical_level_fails_with_escape_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("low");
    // half of the Table 1 critical level
    let o = rimfg(&["--out", out.to_str().unwrap(), "solve-leader", "--gamma", "1104.66"], &[]);
    assert_ne!(o.status.code(), Some(0));
    let t = text(&o);
    assert!(t.contains("concavity solvable") && t.contains("Escape"), "{t}");
    let m = manifest(&out);
    assert_eq!(m["status"], "FAILED");
    assert!(!m["failures"].as_array().unwrap().is_empty());
    assert_eq!(manifests_in(&out), 1);
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let flag_out = dir.path().join("flag");
    let env_out = dir.path().join("env");
    let o = rimfg(
        &["--out", flag_out.to_str().unwrap(), "validate"],
        &[("RIMFG_OUT", env_out.to_str().unwrap()), ("RIMFG_SEED", "7")],
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(env_out.join("manifest.json").exists());
    assert!(!flag_out.exists());
    assert_eq!(manifest(&env_out)["flags"]["global"]["seed"], 7);

    let o = rimfg(&["--out", flag_out.to_str().unwrap(), "validate"], &[("RIMFG_SEED", "abc")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("ParseError"));
}

#[test]
fn invalid_assumptions_fail_validate() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(rimfg::cli::TABLE1_CONFIG).unwrap();
    v["leader_cost"]["R1"] = serde_json::json!(0.0);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = dir.path().join("o");
    let o = rimfg(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "validate"], &[]);
    assert_ne!(o.status.code(), Some(0));
    assert!(text(&o).contains("R1"));
}

#[test]
fn simulation_outputs_do_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = rimfg(
            &[
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
                "--grid-steps",
                "200",
                "simulate",
                "--n",
                "8",
                "--paths",
                "6",
            ],
            &[],
        );
        assert!(o.status.code().unwrap() <= 1, "{}", text(&o));
        out
    };
    let (a, b) = (run("one", "1"), run("four", "4"));
    let mut n = 0;
    for e in std::fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        if name.to_string_lossy().ends_with(".csv") || name == "summary.json" {
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
            n += 1;
        }
    }
    assert!(n >= 5);
    for f in ["limit_states.csv", "population_states.csv", "controls.csv", "costs.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn gamma_hat_trace_has_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = rimfg(&["--out", out.to_str().unwrap(), "gamma-hat", "--tol", "1"], &[]);
    assert!(o.status.code().unwrap() <= 1, "{}", text(&o));
    let trace = std::fs::read_to_string(out.join("gamma_trace.csv")).unwrap();
    assert!(trace.starts_with("gamma,solvable,t_escape\n"), "{}", trace.lines().next().unwrap());
    assert!(text(&o).contains("gamma_hat"));
}
