use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn rgflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("RGFLOW_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cut(v: f64, last: usize) -> Value {
    json!({ "prefix": vec![v; last + 1] })
}

fn standard(last: usize, lambda: f64) -> Value {
    json!({
        "beta": cut(1.0, last),
        "eta": cut(0.3, last),
        "gamma": cut(0.2, last),
        "theta": cut(0.5, last),
        "zeta": cut(-0.3, last),
        "ups_gg": cut(0.1, last),
        "ups_zz": cut(0.1, last),
        "lambda": { "tail": { "rule": "constant", "value": lambda } },
    })
}

fn cubic() -> Value {
    json!({ "kind": "cubic", "c_rho": 0.25, "c_psi": 0.25, "kappa": 0.2 })
}

fn random_model() -> Value {
    json!({ "kind": "random-polynomial", "dim": 1, "kappa": 0.2, "scale_rho": 0.3, "scale_psi": 0.1, "coupling": 0.2 })
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn columns(p: &Path, n: usize) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let head: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().take(n).map(|s| s.parse().unwrap()).collect())
        .collect();
    (head, rows)
}

fn without_metadata(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("metadata");
    v
}

#[test]
fn quadratic_with_zero_beta_keeps_g_constant() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["quadratic", "--g0", "0.05", "--out-dir", "out"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (head, rows) = columns(&t.path().join("out/quadratic.csv"), 5);
    assert_eq!(head, ["j", "gbar", "zbar", "mubar", "chi"]);
    assert!(rows.iter().all(|r| r[1] == 0.05));
    let doc = read_json(&t.path().join("out/quadratic.json"));
    assert_eq!(doc["pass"], true);
}

#[test]
fn constant_beta_reports_asymptotic_ratio() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({ "g0": 0.05, "params": { "beta": { "tail": { "rule": "constant", "value": 1.0 } } } }),
    );
    let o = rgflow(&["quadratic", "--config", &cfg], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("quadratic.json"));
    let certs = doc["certificates"].as_array().unwrap();
    let ratio = certs.iter().find(|c| c["name"] == "asymptotic-ratio").unwrap();
    assert_eq!(ratio["pass"], true);
    assert!(ratio["value"].as_f64().unwrap() < 0.2);
}

#[test]
fn negative_omega_is_a_config_error() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &json!({ "g0": 0.05, "params": { "omega": -2.0 } }));
    let o = rgflow(&["quadratic", "--config", &cfg, "--out-dir", "out"], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("omega"), "{}", stderr(&o));
    assert!(!t.path().join("out").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &json!({ "g0": 0.05, "scheme": { "a": 1.0, "bee": 0.9 } }));
    let o = rgflow(&["quadratic", "--config", &cfg], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bee"));
}

#[test]
fn missing_g0_is_a_config_error() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["flow"], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("g0"));
}

#[test]
fn zero_rho_flow_matches_quadratic_files() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({ "g0": 0.05, "params": standard(40, 2.0), "model": { "kind": "linear-psi", "kappa": 0.2 } }),
    );
    assert_eq!(code(&rgflow(&["quadratic", "--config", &cfg, "--out-dir", "q"], t.path())), 0);
    let o = rgflow(&["flow", "--config", &cfg, "--out-dir", "f"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, q) = columns(&t.path().join("q/quadratic.csv"), 5);
    let (head, f) = columns(&t.path().join("f/flow.csv"), 5);
    assert_eq!(head, ["j", "g", "z", "mu", "chi", "k_0"]);
    assert_eq!(q, f);
}

#[test]
fn cubic_flow_stays_in_the_ball() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &json!({ "g0": 0.05, "params": standard(40, 2.0), "model": cubic() }));
    let o = rgflow(&["flow", "--config", &cfg], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("flow.json"));
    let ball = &doc["result"]["ball"];
    for c in ["k", "g", "z", "mu"] {
        assert!(ball[c].as_f64().unwrap() <= 0.9, "{c}: {}", ball[c]);
    }
    assert_eq!(doc["pass"], true);
}

#[test]
fn g0_above_gate_exits_3_without_files() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &json!({ "params": standard(40, 2.0), "model": cubic() }));
    let o = rgflow(&["flow", "--config", &cfg, "--g0", "0.2", "--out-dir", "out"], t.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gate"));
    assert!(!t.path().join("out").exists());
}

#[test]
fn tight_ball_exits_4() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({
            "g0": 0.05,
            "params": standard(40, 2.0),
            "model": cubic(),
            "homotopy": { "ball_radius": 1e-4 },
        }),
    );
    let o = rgflow(&["flow", "--config", &cfg, "--out-dir", "out"], t.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!t.path().join("out").exists());
}

#[test]
fn flow_json_is_deterministic_and_seeded() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({ "g0": 0.05, "params": standard(40, 2.0), "model": random_model(), "seed": 3 }),
    );
    for d in ["a", "b"] {
        assert_eq!(code(&rgflow(&["flow", "--config", &cfg, "--out-dir", "out", "--jobs", "1"], t.path())), 0);
        fs::rename(t.path().join("out"), t.path().join(d)).unwrap();
    }
    let a = without_metadata(read_json(&t.path().join("a/flow.json")));
    let b = without_metadata(read_json(&t.path().join("b/flow.json")));
    assert_eq!(a, b);
    assert_eq!(
        fs::read(t.path().join("a/flow.csv")).unwrap(),
        fs::read(t.path().join("b/flow.csv")).unwrap()
    );

    let env = Command::new(env!("CARGO_BIN_EXE_rgflow"))
        .args(["flow", "--config", &cfg, "--out-dir", "c"])
        .current_dir(t.path())
        .env("RGFLOW_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    let c = read_json(&t.path().join("c/flow.json"));
    assert_eq!(c["metadata"]["seed"], 11);
    assert_ne!(c["z0"], a["z0"]);

    let flag = Command::new(env!("CARGO_BIN_EXE_rgflow"))
        .args(["flow", "--config", &cfg, "--out-dir", "d", "--seed", "3"])
        .current_dir(t.path())
        .env("RGFLOW_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&flag), 0);
    assert_eq!(without_metadata(read_json(&t.path().join("d/flow.json")))["z0"], a["z0"]);
}

#[test]
fn bad_seed_env_is_a_config_error() {
    let t = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rgflow"))
        .args(["quadratic", "--g0", "0.05"])
        .current_dir(t.path())
        .env("RGFLOW_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("RGFLOW_SEED"));
}

#[test]
fn oracle_compare_agrees() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({ "g0": 0.05, "params": standard(15, 1.5), "model": random_model(), "quadratic": { "horizon": 50 } }),
    );
    let o = rgflow(&["oracle-compare", "--config", &cfg], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("oracle.json"));
    assert!(doc["max_gap"].as_f64().unwrap() <= 1e-7);
    assert_eq!(doc["horizon"], 50);
}

#[test]
fn verify_single_check() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["verify", "--only", "s0-exactness"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("verify.json"));
    let checks = doc["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "s0-exactness");
    assert_eq!(checks[0]["status"], "pass");
}

#[test]
fn verify_reports_counterexample_as_expected_failure() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["verify", "--only", "quadratic-envelope-counterexample"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("verify.json"));
    let c = &doc["checks"][0];
    assert_eq!(c["status"], "expected-fail");
    assert_eq!(c["holds"], false);
    assert_eq!(doc["expected_failures"], 1);
}

#[test]
fn verify_unknown_check_is_a_config_error() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["verify", "--only", "no-such-check"], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("s0-exactness"));
}

#[test]
fn verify_full_suite_passes() {
    let t = TempDir::new().unwrap();
    let o = rgflow(&["verify", "--out-dir", "out"], t.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let doc = read_json(&t.path().join("out/verify.json"));
    assert_eq!(doc["total"], 13);
    assert_eq!(doc["failed"].as_array().unwrap().len(), 0);
}

#[test]
fn empty_sweep_grid_exits_2() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &json!({ "sweep": { "g0_grid": [] } }));
    let o = rgflow(&["sweep", "--config", &cfg], t.path());
    assert_eq!(code(&o), 2);
    let cfg = write_config(t.path(), &json!({ "g0": 0.05, "sweep": { "kind": "beta-scale", "m_grid": [] } }));
    assert_eq!(code(&rgflow(&["sweep", "--config", &cfg], t.path())), 2);
}

#[test]
fn single_point_sweep_matches_flow() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({
            "g0": 0.05,
            "params": standard(40, 2.0),
            "model": cubic(),
            "sweep": { "g0_grid": [0.05], "derivatives": false },
        }),
    );
    assert_eq!(code(&rgflow(&["flow", "--config", &cfg], t.path())), 0);
    let o = rgflow(&["sweep", "--config", &cfg, "--jobs", "2"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let flow = read_json(&t.path().join("flow.json"));
    let sweep = read_json(&t.path().join("sweep.json"));
    let row = &sweep["summary"]["rows"][0];
    assert_eq!(row["z0"], flow["z0"]);
    assert_eq!(row["mu0"], flow["mu0"]);
    assert_eq!(row["flow_residual"], flow["result"]["flow_residual"]);
    let mut r = csv::Reader::from_path(t.path().join("sweep.csv")).unwrap();
    assert_eq!(r.records().count(), 1);
}

#[test]
fn g0_sweep_carries_derivative_fit() {
    let t = TempDir::new().unwrap();
    let mut params = standard(400, 2.0);
    params["beta"] = cut(0.8, 400);
    let cfg = write_config(
        t.path(),
        &json!({ "params": params, "model": cubic(), "sweep": { "g0_grid": [0.1, 0.05, 0.025, 0.0125] } }),
    );
    let o = rgflow(&["sweep", "--config", &cfg, "--jobs", "4"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("sweep.json"));
    let fit = &doc["summary"]["derivative_fit"];
    for d in ["dz0_dg0", "dmu0_dg0"] {
        assert!(fit[d]["spread"].as_f64().unwrap() < 0.5);
        assert!(fit[d]["uniform_bound"].as_f64().unwrap() < 1.0);
    }
    assert_eq!(doc["succeeded"], 4);
}

#[test]
fn sweep_threshold_controls_exit() {
    let t = TempDir::new().unwrap();
    let base = json!({
        "params": standard(40, 2.0),
        "model": cubic(),
        "sweep": { "g0_grid": [0.05, 0.2], "derivatives": false, "min_success_fraction": 0.5 },
    });
    let cfg = write_config(t.path(), &base);
    let o = rgflow(&["sweep", "--config", &cfg], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_json(&t.path().join("sweep.json"))["summary"]["rows"].clone();
    assert_eq!(rows[1]["ok"], false);
    assert!(rows[1]["error"].as_str().unwrap().contains("gate"));

    let mut strict = base.clone();
    strict["sweep"]["min_success_fraction"] = json!(1.0);
    let cfg = write_config(t.path(), &strict);
    assert_eq!(code(&rgflow(&["sweep", "--config", &cfg], t.path())), 1);
}

#[test]
fn beta_scale_sweep_is_continuous() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &json!({
            "g0": 0.05,
            "params": standard(40, 2.0),
            "model": cubic(),
            "sweep": { "kind": "beta-scale", "m_grid": [0.95, 1.0, 1.05] },
        }),
    );
    let o = rgflow(&["sweep", "--config", &cfg], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&t.path().join("sweep.json"));
    let cont = &doc["summary"]["continuity"];
    assert_eq!(cont["failures"], 0);
    assert_eq!(cont["diffs"].as_array().unwrap().len(), 2);
}
