use std::path::Path;
use std::process::{Command, Output};

use nth_lab::output::read_csv;
use nth_lab::{CommandKind, ExperimentSpec};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nth-lab"))
}

fn write_spec(dir: &Path, name: &str, spec: &ExperimentSpec) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, spec.to_json()).unwrap();
    p
}

fn run(cmd: &str, spec: &Path, out: &Path) -> Output {
    bin()
        .args([cmd, "--config"])
        .arg(spec)
        .arg("--out")
        .arg(out)
        .env_remove("NTH_LAB_SEED")
        .output()
        .unwrap()
}

fn small_grad_check() -> ExperimentSpec {
    let mut s = ExperimentSpec::preset(CommandKind::GradCheck);
    s.seeds = vec![0, 1];
    s.options.probes_per_block = 3;
    s
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn grad_check_passes_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "g.json", &small_grad_check());
    let out = run("grad-check", &spec, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS gradient"), "{stdout}");
    let (header, rows) = read_csv(&dir.path().join("out/grad_check.csv")).unwrap();
    assert_eq!(header[0], "seed");
    // five inputs plus the loss, per seed
    assert_eq!(rows.len(), 2 * 6);
    let j = read_json(&dir.path().join("out/grad_check.json"));
    assert_eq!(j["passed"], Value::Bool(true));
    assert_eq!(j["meta"]["seed_source"], "spec");
}

#[test]
fn injected_fault_fails_and_names_block() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small_grad_check();
    s.options.fault = Some(nth_lab::spec::Fault {
        block: "W2".into(),
        index: 17,
        delta: 1e-3,
    });
    let spec = write_spec(dir.path(), "g.json", &s);
    let out = run("grad-check", &spec, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL gradient") && stdout.contains("block W2 index 17"), "{stdout}");
}

#[test]
fn identity_activation_passes() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small_grad_check();
    s.config.activation = "identity".into();
    let spec = write_spec(dir.path(), "g.json", &s);
    let out = run("grad-check", &spec, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn config_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut v: Value = serde_json::from_str(&small_grad_check().to_json()).unwrap();
    v["optoins"] = Value::Null;
    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, v.to_string()).unwrap();
    assert_eq!(run("grad-check", &typo, &out_dir).status.code(), Some(4));

    let good = write_spec(dir.path(), "g.json", &small_grad_check());
    assert_eq!(run("flow", &good, &out_dir).status.code(), Some(4));
    assert_eq!(run("grad-check", &dir.path().join("missing.json"), &out_dir).status.code(), Some(4));

    let mut s = small_grad_check();
    s.seeds = vec![1, 1];
    let dup = write_spec(dir.path(), "dup.json", &s);
    assert_eq!(run("grad-check", &dup, &out_dir).status.code(), Some(4));

    let out = bin()
        .args(["grad-check", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&out_dir)
        .env("NTH_LAB_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(4));
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "g.json", &small_grad_check());
    let out = bin()
        .args(["grad-check", "--config"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path())
        .env("NTH_LAB_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert!(text.contains("# base_seed: 5 (from NTH_LAB_SEED)"), "{text}");
    let j = read_json(&dir.path().join("grad_check.json"));
    assert_eq!(j["meta"]["base_seed"], 5);
    let s = ExperimentSpec {
        base_seed: 5,
        ..small_grad_check()
    };
    assert_eq!(j["meta"]["init_seeds"], serde_json::json!(s.init_seeds()));
}

#[test]
fn dataset_file_is_resolved_next_to_spec() {
    let dir = tempfile::tempdir().unwrap();
    let ds = nth_lab_core::Dataset::generate(3, 4, 11).unwrap();
    let mut text = String::from("# three samples\nx1,x2,x3,x4,y\n");
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        let cols: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&format!("{},{y:.17e}\n", cols.join(",")));
    }
    std::fs::write(dir.path().join("data.csv"), text).unwrap();
    let mut s = small_grad_check();
    s.dataset = nth_lab::spec::DatasetSpec::File {
        path: "data.csv".into(),
    };
    let spec = write_spec(dir.path(), "g.json", &s);
    let out = run("grad-check", &spec, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, rows) = read_csv(&dir.path().join("out/grad_check.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 4);
}

#[test]
fn zero_residual_flow_stays_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ExperimentSpec::preset(CommandKind::Flow);
    s.config.m = 64;
    s.horizon = 0.5;
    s.step = 0.1;
    s.options.zero_residual = true;
    let spec = write_spec(dir.path(), "f.json", &s);
    let out = run("flow", &spec, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let (h, rows) = read_csv(&dir.path().join("flow.csv")).unwrap();
    let li = h.iter().position(|c| c == "loss").unwrap();
    for r in rows {
        assert!(r[li].parse::<f64>().unwrap() < 1e-28);
    }
}

#[test]
fn blow_up_exits_3_with_last_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ExperimentSpec::preset(CommandKind::Flow);
    s.config.m = 32;
    s.horizon = 1e300;
    s.step = 1e300;
    s.scheme = nth_lab::spec::SchemeSpec::Euler;
    let spec = write_spec(dir.path(), "f.json", &s);
    let out = run("flow", &spec, dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = read_json(&dir.path().join("flow_last_state.json"));
    assert_eq!(dump["passed"], Value::Bool(false));
    assert!(!dump["results"]["error"].as_str().unwrap().is_empty());
    assert!(dir.path().join("flow.csv").exists());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for c in CommandKind::ALL {
        let path = root.join(format!("{}.json", c.stem()));
        let spec = ExperimentSpec::load(&path).unwrap();
        assert_eq!(spec, ExperimentSpec::preset(c), "{}", path.display());
    }
}
