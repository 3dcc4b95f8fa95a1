use haarstab::{Coeffs2D, DyadicInterval, Multiplier2D};
use serde_json::Value;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_haarstab"));
    c.env_remove("HAARSTAB_SEED");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("haarstab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write_json<T: serde::Serialize>(name: &str, value: &T) -> PathBuf {
    let p = scratch(name);
    std::fs::write(&p, serde_json::to_string(value).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["pass"], Value::Bool(true));
}

#[test]
fn lambda_mu_of_the_capon_pattern() {
    let p = write_json("capon.json", &Multiplier2D::capon(10, 10));
    let o = run(&["lambda-mu", "--multiplier", p.to_str().unwrap(), "--lo", "2", "--hi", "9"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o), serde_json::json!({"lambda": 1.0, "mu": 0.0, "converged": true}));
    let o = run(&["lambda-mu", "--multiplier", p.to_str().unwrap(), "--lo", "2", "--hi", "9", "--table"]);
    assert!(stdout_json(&o)["lambdaTable"].is_array());
}

#[test]
fn probe_ratios_increase() {
    let csv = scratch("probe.csv");
    let o = run(&["--csv", csv.to_str().unwrap(), "probe-capon", "--family", "l1-row", "--space", "s00:L1:L2", "--n", "1..6"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = stdout_json(&o)["rows"].as_array().unwrap().clone();
    let ratios: Vec<f64> = rows.iter().map(|r| r["ratio"].as_f64().unwrap()).collect();
    assert_eq!(ratios.len(), 6);
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,caponNorm,caponStdError,zNorm,zStdError,ratio,ratioStdError");
    assert_eq!(lines.count(), 6);
    assert!(!text.contains('\r'));
}

#[test]
fn norm_of_a_vector_file() {
    let z = Coeffs2D::single(DyadicInterval::root(), DyadicInterval::root(), 2.0);
    let p = write_json("vec.json", &z);
    let o = run(&["norm", "--vector", p.to_str().unwrap(), "--space", "s00:L2:L2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["value"].as_f64().unwrap(), 2.0);
}

#[test]
fn malformed_input_exits_with_two() {
    let p = scratch("broken.json");
    std::fs::write(&p, "{\n  \"kind\": \"level\",\n  \"maxLevelFirst\": 2,\n  oops\n}").unwrap();
    let o = run(&["variation", "--multiplier", p.to_str().unwrap(), "--truncation", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":4:"), "{err}");

    let o = run(&["norm", "--vector", p.to_str().unwrap(), "--space", "s22:L1:L1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["probe-capon", "--family", "nope", "--space", "s00:L1:L1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stabilize_artifacts_reload() {
    let m = write_json("seeded.json", &Multiplier2D::seeded(4, 1.0, 16, 16));
    let out = scratch("dtilde.json");
    let h = scratch("h.json");
    let args = ["stabilize", "--multiplier", m.to_str().unwrap(), "--seed", "4"];
    let o = bin().args(args).args(["--out-multiplier", out.to_str().unwrap(), "--out-h", h.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = stdout_json(&o);
    assert_eq!(run(&args).stdout, o.stdout);

    let d: Multiplier2D = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reloaded: Value = serde_json::to_value(&d).unwrap();
    assert_eq!(reloaded, first["dTilde"]);
    let sys: haarstab::FaithfulSystem = serde_json::from_str(&std::fs::read_to_string(&h).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&sys).unwrap(), first["hTilde"]);

    let o = run(&["variation", "--multiplier", out.to_str().unwrap(), "--truncation", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout_json(&o)["t2sSemiNorm"].as_f64().is_some());
}

#[test]
fn seed_comes_from_the_environment() {
    let m = write_json("seeded-env.json", &Multiplier2D::seeded(9, 1.0, 16, 16));
    let base = ["stabilize", "--multiplier", m.to_str().unwrap()];
    let a = bin().args(base).env("HAARSTAB_SEED", "17").output().unwrap();
    let b = run(&[base[0], base[1], base[2], "--seed", "17"]);
    let c = run(&base);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let bad = bin().args(base).env("HAARSTAB_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn check_factor_on_the_identity() {
    let m = write_json("identity.json", &Multiplier2D::identity(16, 16));
    let csv = scratch("factor.csv");
    let o = run(&["--csv", csv.to_str().unwrap(), "check-factor", "--multiplier", m.to_str().unwrap(), "--space", "s00:L1:L1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["maxRatio"].as_f64(), Some(0.0));
    assert_eq!(v["ratios"].as_array().unwrap().len(), 20);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 21);
}

#[test]
fn exhausted_budget_fails_the_check() {
    let m = write_json("budget.json", &Multiplier2D::seeded(2, 1.0, 16, 16));
    let o = run(&["stabilize", "--multiplier", m.to_str().unwrap(), "--budget", "5"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}
