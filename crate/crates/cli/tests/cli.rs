use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use wnsf::eval::model_fit;
use wnsf::model::systems::{resonant_oe, second_order_bj};

const BJ_SYSTEM: &str = r#""system": {"L": [0, 1, 0.1], "F": [1, -0.5, 0.75], "C": [1, 0.7], "D": [1, -0.9]}"#;

fn wnsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wnsf")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "{}", stderr(out));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn bj_config(dir: &Path, loop_kind: &str, n: usize, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
            {BJ_SYSTEM},
            "controller": {{"gain": 1.0}},
            "experiment": {{"n_samples": {n}, "seed": 11, "loop_kind": "{loop_kind}"}}{extra}
        }}"#
    );
    write(dir, &format!("{loop_kind}_{n}.json"), &text)
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn theta(v: &Value) -> Vec<f64> {
    v["theta"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn simulate_writes_a_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(dir.path(), "closed", 1000, "");
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let o = wnsf(&["simulate", "--config", s(&cfg), "--out", s(out), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,r,u,y"));
    assert_eq!(lines.count(), 1000);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let echo: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.config.json")).unwrap()).unwrap();
    assert_eq!(echo["experiment"]["seed"], 3);
    assert_eq!(echo["experiment"]["n_samples"], 1000);
}

#[test]
fn schema_errors_exit_with_code_2_and_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let missing = write(
        dir.path(),
        "missing.json",
        r#"{"system": {"L": [0, 1]}, "controller": {"gain": 1.0},
            "experiment": {"n_samples": 100, "loop_kind": "open"}}"#,
    );
    let o = wnsf(&["simulate", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("`system`") && msg.contains("`F`"), "{msg}");

    let unknown = bj_config(dir.path(), "open", 100, r#", "extra": 1"#);
    let o = wnsf(&["simulate", "--config", s(&unknown), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("extra"));

    let o = wnsf(&["simulate", "--config", s(&dir.path().join("absent.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn unstable_loop_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "unstable.json",
        r#"{"system": {"L": [0, 1, -1.2], "F": [1, -2.5, 2.4, -0.88]},
            "controller": {"gain": 0.3},
            "experiment": {"n_samples": 500, "loop_kind": "closed"}}"#,
    );
    let o = wnsf(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("u.csv"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("unstable"));
}

#[test]
fn identify_honours_the_range_syntax() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(dir.path(), "closed", 2000, "");
    let data = dir.path().join("d.csv");
    assert_eq!(code(&wnsf(&["simulate", "-c", s(&cfg), "-o", s(&data)])), 0);
    let v = json(&wnsf(&["identify", "-d", s(&data), "--orders", "2,2,1,1", "--n-grid", "20:40:10", "--max-iter", "2"]));
    let mut ns: Vec<u64> = v["trace"].as_array().unwrap().iter().map(|t| t["n"].as_u64().unwrap()).collect();
    ns.dedup();
    assert_eq!(ns, [20, 30, 40]);
    assert_eq!(theta(&v).len(), 6);
    assert!([20, 30, 40].contains(&v["n_used"].as_u64().unwrap()));
}

#[test]
fn identify_lands_within_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(dir.path(), "closed", 10_000, "");
    let data = dir.path().join("d.csv");
    assert_eq!(code(&wnsf(&["simulate", "-c", s(&cfg), "-o", s(&data)])), 0);
    let v = json(&wnsf(&["identify", "-d", s(&data), "--orders", "2,2,1,1", "--n-grid", "50"]));
    let crb = json(&wnsf(&["crb", "-c", s(&cfg)]));
    let m_inv = &crb["mcr"]["M_inv"];
    let cols = m_inv["cols"].as_u64().unwrap() as usize;
    let noise_var = crb["mcr"]["noise_var"].as_f64().unwrap();
    let truth = second_order_bj().theta();
    for (k, est) in theta(&v).iter().enumerate() {
        let var = noise_var * m_inv["data"][k * cols + k].as_f64().unwrap() / 10_000.0;
        assert!((est - truth[k]).abs() < 3.0 * var.sqrt(), "parameter {k}: {est} vs {}", truth[k]);
    }
}

#[test]
fn identify_output_error_system() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("oe.csv");
    let o = wnsf(&["simulate", "-c", &shipped("resonant_oe.json"), "-o", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = json(&wnsf(&[
        "identify", "-d", s(&data), "--orders", "3,2,0,0", "--n-grid", "250", "--max-iter", "100", "--tol", "1e-4",
        "--known-zero-ic",
    ]));
    let est = wnsf::BjModel::from_theta(&theta(&v), wnsf::ModelOrders::new(3, 2, 0, 0)).unwrap();
    let fit = model_fit(&resonant_oe().plant(), &est.plant()).unwrap();
    assert!(fit >= 90.0, "FIT {fit}");
}

#[test]
fn identification_failure_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("t,r,u,y\n");
    for t in 1..=200 {
        text.push_str(&format!("{t},0,0,0\n"));
    }
    let data = write(dir.path(), "zeros.csv", &text);
    let o = wnsf(&["identify", "-d", s(&data), "--orders", "2,2,1,1", "--n-grid", "10,20"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("n = 10:") && msg.contains("n = 20:"), "{msg}");

    let o = wnsf(&["identify", "-d", s(&dir.path().join("nope.csv")), "--orders", "2,2,1,1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn montecarlo_single_run_matches_identify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(
        dir.path(),
        "closed",
        2000,
        r#", "wnsf_options": {"n_grid": [30], "max_iter": 3, "known_zero_ic": true}"#,
    );
    let out_dir = dir.path().join("mc");
    let o = wnsf(&["montecarlo", "-c", s(&cfg), "--runs", "1", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let record = &summary["records"][0];
    assert_eq!(record["seed"], 11);

    let data = dir.path().join("d.csv");
    assert_eq!(code(&wnsf(&["simulate", "-c", s(&cfg), "-o", s(&data)])), 0);
    let v = json(&wnsf(&[
        "identify", "-d", s(&data), "--orders", "2,2,1,1", "--n-grid", "30", "--max-iter", "3", "--known-zero-ic",
    ]));
    assert_eq!(record["theta_hat"], v["theta"]);
    assert_eq!(record["pem_cost"], v["pem_cost"]);
}

#[test]
fn montecarlo_output_does_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(dir.path(), "open", 1500, r#", "wnsf_options": {"n_grid": [20, 30], "max_iter": 4}"#);
    let (one, eight) = (dir.path().join("one"), dir.path().join("eight"));
    for (out, jobs) in [(&one, "1"), (&eight, "8")] {
        let o = wnsf(&["montecarlo", "-c", s(&cfg), "--runs", "6", "--jobs", jobs, "--out-dir", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["runs.csv", "fit.csv", "summary.json", "config.json"] {
        assert_eq!(std::fs::read(one.join(file)).unwrap(), std::fs::read(eight.join(file)).unwrap(), "{file}");
    }
    let runs = std::fs::read_to_string(one.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().next(), Some("seed,n_used,iterations,pem_cost,fit,mse"));
    assert_eq!(runs.lines().count(), 7);
}

#[test]
fn crb_reports_reference_traces() {
    for (name, expected) in [("closed_loop_bj.json", 1.0259), ("open_loop_bj.json", 1.9572)] {
        let v = json(&wnsf(&["crb", "-c", &shipped(name)]));
        let trace = v["mcr"]["dyn_block_trace"].as_f64().unwrap();
        assert!((trace - expected).abs() < 1e-3, "{name}: {trace}");
        let coarse = json(&wnsf(&["crb", "-c", &shipped(name), "--grid-size", "4096"]));
        let coarse = coarse["mcr"]["dyn_block_trace"].as_f64().unwrap();
        assert!((coarse - trace).abs() < 1e-6, "{name}: {coarse} vs {trace}");
        assert_eq!(v["grid_size"], 8192);
    }
    let v = json(&wnsf(&["crb", "-c", &shipped("closed_loop_bj.json"), "--mbar-order", "200"]));
    assert!(v["mcl"]["dyn_block_trace"].as_f64().unwrap() >= v["mcr"]["dyn_block_trace"].as_f64().unwrap());
    assert!(v["mbar"]["relative_distance"].as_f64().unwrap() < 1e-2);
}

#[test]
fn non_informative_experiment_exits_with_code_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bj_config(dir.path(), "open", 1000, r#", "reference": {"gain": 0.0}"#);
    let o = wnsf(&["crb", "-c", s(&cfg)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn logging_goes_to_stderr() {
    let o = Command::new(env!("CARGO_BIN_EXE_wnsf"))
        .args(["crb", "-c", &shipped("open_loop_bj.json"), "--grid-size", "1024"])
        .env("WNSF_LOG", "debug")
        .output()
        .unwrap();
    json(&o);
}
