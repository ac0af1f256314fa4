use std::path::Path;
use std::process::{Command, Output};

use hemopinn::backend::NumericalBackend;
use hemopinn::inverse::MeasuredBeat;
use hemopinn::model::{ModelConstants, Multipliers};
use hemopinn::sampling::ParameterSpace;
use hemopinn::solver::SolverConfig;
use serde_json::Value;

fn hemopinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hemopinn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Small, fast settings in the two-parameter space.
const FAST: &str = r#"{
  "space": {"free": ["E_es", "t_tr"]},
  "solver": {"dt": 0.1, "cycle_tol": 1e-5},
  "surrogate": {"hidden": 4, "depth": 1, "n_harmonics": 2, "calibration_lhs": 2},
  "train": {"n_cases": 2, "n_test_cases": 1, "n_timepoints": 8, "batch_cases": 1, "epochs_max": 2},
  "eval": {"n_cases": 2},
  "sobol": {"n_base": 4, "outputs": ["V_lv"], "n_timepoints": 8},
  "de": {"pop_size": 8, "max_generations": 2},
  "synthetic": {"n_cases": 1, "n_samples": 40}
}"#;

fn fast_config(dir: &Path) -> String {
    let p = dir.join("fast.json");
    std::fs::write(&p, FAST).unwrap();
    path(&p).to_string()
}

#[test]
fn simulate_writes_waveforms_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = hemopinn(&["simulate", "--config", "default", "--out", path(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(out.join("waveforms.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 16);
    assert_eq!(
        header,
        "t_ms,V_lv,V_ao,V_art,V_vc,V_la,P_lv,P_ao,P_art,P_vc,P_la,q_av,q_ao,q_art,q_vc,q_mv"
    );
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["converged"], Value::Bool(true));

    // The resolved config alone reproduces the artifact.
    let again = dir.path().join("again");
    let o = hemopinn(&[
        "simulate",
        "--config",
        path(&out.join("config.json")),
        "--out",
        path(&again),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(again.join("waveforms.csv")).unwrap(),
        csv.as_bytes()
    );
}

#[test]
fn simulate_takes_multipliers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = hemopinn(&[
        "simulate",
        "--multipliers",
        "1,1,1,1,1,1,1,1,1.5,1",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["multipliers"][8], 1.5);
    let o = hemopinn(&["simulate", "--multipliers", "1,2", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dataset_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = hemopinn(&["dataset", "--seed", seed, "--n", "12", "--out", path(&out)]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(out.join("dataset.csv")).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("case_id,m_Rav,"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn usage_and_validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hemopinn(&["bogus"]).status.code(), Some(1));
    let o = hemopinn(&["simulate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(hemopinn(&[]).status.code(), Some(1));
    assert_eq!(hemopinn(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 5}}"#).unwrap();
    let o = hemopinn(&[
        "simulate",
        "--config",
        path(&bad),
        "--out",
        path(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));

    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"solver": {"dt": -1.0}}"#).unwrap();
    let o = hemopinn(&[
        "simulate",
        "--config",
        path(&invalid),
        "--out",
        path(&dir.path().join("y")),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = hemopinn(&[
        "fit",
        "--beat",
        "/no/such/beat.csv",
        "--out",
        path(&dir.path().join("z")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = hemopinn(&[
        "eval",
        "--model",
        "/no/such/model.bin",
        "--out",
        path(&dir.path().join("w")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // Output directory below a regular file cannot be created.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = hemopinn(&["simulate", "--out", path(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_writes_parameters_in_table_order_and_leaves_input_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let backend = NumericalBackend {
        space: ParameterSpace::contractility_timing(),
        constants: ModelConstants::default(),
        solver: SolverConfig::loosened(),
    };
    let mut m = Multipliers::ones();
    m.0[8] = 1.3;
    let beat = MeasuredBeat::from_backend(&backend, &m, 50).unwrap();
    let beat_path = dir.path().join("beat.csv");
    let mut f = std::fs::File::create(&beat_path).unwrap();
    beat.write_csv(&mut f).unwrap();
    drop(f);
    let before = std::fs::read(&beat_path).unwrap();

    let out = dir.path().join("fit");
    let o = hemopinn(&[
        "fit",
        "--config",
        &cfg,
        "--beat",
        path(&beat_path),
        "--out",
        path(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(std::fs::read(&beat_path).unwrap(), before);

    let text = std::fs::read_to_string(out.join("fit.json")).unwrap();
    let names = [
        "R_av", "R_ao", "C_ao", "R_art", "C_art", "R_vc", "C_vc", "R_mv", "E_es", "t_tr",
    ];
    let params = &text[text.find("\"parameters\"").unwrap()..];
    let mut last = 0;
    for n in names {
        let at = params.find(&format!("\"{n}\"")).unwrap();
        assert!(at > last, "{n} out of order");
        last = at;
    }
    let v: Value = serde_json::from_str(&text).unwrap();
    assert!(v["r2_volume"].as_f64().unwrap() <= 1.0);
}

#[test]
fn surrogate_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());

    let cal = dir.path().join("cal");
    let o = hemopinn(&["calibrate", "--config", &cfg, "--out", path(&cal)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let scaling = read_json(&cal.join("scaling.json"));
    assert!(scaling["lv"]["min"].as_f64().unwrap() < scaling["lv"]["max"].as_f64().unwrap());

    let tr = dir.path().join("train");
    let o = hemopinn(&[
        "train",
        "--config",
        &cfg,
        "--scaling",
        path(&cal.join("scaling.json")),
        "--out",
        path(&tr),
        "--threads",
        "1",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let model = tr.join("model.bin");
    let log = std::fs::read_to_string(tr.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,test_loss,lr,loss_kind,alpha,seconds"));
    assert!(log.lines().count() >= 2);

    let ev = dir.path().join("eval");
    let o = hemopinn(&[
        "eval",
        "--config",
        &cfg,
        "--model",
        path(&model),
        "--out",
        path(&ev),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let rep = read_json(&ev.join("eval_smooth.json"));
    assert_eq!(rep["n_cases"], 2);
    assert_eq!(rep["compartments"].as_array().unwrap().len(), 5);
    assert_eq!(
        read_json(&ev.join("eval_hard.json"))["meta"]["reference_law"]["mode"],
        "hard"
    );
    assert!(ev.join("eval_cases.csv").is_file());

    let so = dir.path().join("sobol");
    let o = hemopinn(&[
        "sobol",
        "--config",
        &cfg,
        "--model",
        path(&model),
        "--out",
        path(&so),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let s = read_json(&so.join("sobol.json"));
    assert_eq!(s["parameters"].as_array().unwrap().len(), 2);

    let sy = dir.path().join("syn");
    let o = hemopinn(&["synthetic-study", "--config", &cfg, "--out", path(&sy)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(std::fs::read_to_string(sy.join("synthetic.csv"))
        .unwrap()
        .starts_with("case,status,"));

    let o = hemopinn(&["info", "--model", path(&model)]);
    assert_eq!(o.status.code(), Some(0));
    let info: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        info["model"]["free_parameters"],
        serde_json::json!(["E_es", "t_tr"])
    );
    assert_eq!(info["parameters"][0], "R_av");
}
