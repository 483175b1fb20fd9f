use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use credit_bsde::cli::{read_artifacts, run_args, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_OK};
use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_credit-bsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn premium_report_for_put() {
    let dir = tempfile::tempdir().unwrap();
    let put = scenario("put.toml");
    let out = run(&["premium", "--scenario", put.to_str().unwrap(), "--paths", "20000"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(dir.path().join("premium.json"));
    let c = r["premium"].as_f64().unwrap();
    let lb = r["lower_bound"]["value"].as_f64().unwrap();
    assert!(lb > 0.0 && c > lb);
    let split = r["y0_defaultable"].as_f64().unwrap() - r["y0_riskfree"].as_f64().unwrap();
    assert!((split - c).abs() < 1e-12);
    assert_eq!(r["method"], "premium_pde");
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("eta,premium,gap"));
    assert_eq!(sweep.lines().count(), 8);
}

#[test]
fn verify_without_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let nd = scenario("no_default.toml");
    let out = run(&["verify", "--scenario", nd.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stdout));
    let r = json(dir.path().join("verify.json"));
    assert_eq!(r["passed"], true);
    assert_eq!(r["premium"].as_f64(), Some(0.0));
    let names: Vec<&str> = r["suites"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["lower_bound", "martingale", "residual"]);
    assert_eq!(r["suites"][1]["detail"]["verdict"], "MARTINGALE");
}

#[test]
fn constrained_premium_has_no_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let boxed = scenario("boxed.toml");
    let out = run(&["premium", "--scenario", boxed.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let r = json(dir.path().join("premium.json"));
    assert!(r["lower_bound"].is_null());
    assert_eq!(r["method"], "bsde_difference");
}

#[test]
fn malformed_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(scenario("put.toml")).unwrap().replace("sigma = 0.2", "sigma = -0.2");
    fs::write(&bad, text).unwrap();
    let out = run(&["price", "--scenario", bad.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(EXIT_INVALID));
    assert!(String::from_utf8_lossy(&out.stderr).contains("market.sigma"));

    let typo = dir.path().join("typo.toml");
    let text = fs::read_to_string(scenario("put.toml")).unwrap().replace("horizon", "horizn");
    fs::write(&typo, text).unwrap();
    let out = run(&["price", "--scenario", typo.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(EXIT_INVALID));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizn"));

    let missing = dir.path().join("nope.toml");
    let out = run(&["price", "--scenario", missing.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(EXIT_INVALID));
}

#[test]
fn bad_arguments_exit_invalid() {
    let put = scenario("put.toml");
    let r = run_args(["credit-bsde", "premium", "--scenario", put.to_str().unwrap(), "--grid", "12"]);
    assert_eq!(r.code, EXIT_INVALID);
    let r = run_args(["credit-bsde", "frobnicate", "--scenario", put.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_INVALID);
    let r = run_args(["credit-bsde", "sweep", "--scenario", put.to_str().unwrap(), "--etas", "0.1,1"]);
    assert_eq!(r.code, EXIT_INVALID);
}

#[test]
fn failed_check_exits_one() {
    // an impossible lower-bound slack forces the check to fail
    let dir = tempfile::tempdir().unwrap();
    let put = scenario("put.toml");
    let out = run(
        &["premium", "--scenario", put.to_str().unwrap(), "--paths", "2000", "--tol", "lower_bound=-100"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(EXIT_CHECK_FAILED));
    assert!(dir.path().join("premium.json").exists());
}

#[test]
fn artifacts_are_idempotent() {
    let put = scenario("rebate.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let args = ["credit-bsde", "price", "--scenario", put.to_str().unwrap(), "--grid", "64x64", "--out", &out];
    let first = run_args(args);
    assert_eq!(first.code, EXIT_OK, "{}", first.message);
    let a = read_artifacts(&first.artifacts).unwrap();
    let second = run_args(args);
    assert_eq!(second.artifacts, first.artifacts);
    assert_eq!(read_artifacts(&second.artifacts).unwrap(), a);
    let names: Vec<String> =
        first.artifacts.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["price.json", "pre.csv", "pre.cbsf", "post.csv", "post.cbsf", "solution.cbsj"]);
}

#[test]
fn surfaces_include_premium_when_unconstrained() {
    let dir = tempfile::tempdir().unwrap();
    let put = scenario("put.toml");
    let out = run(&["surfaces", "--scenario", put.to_str().unwrap(), "--grid", "64x64"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_OK));
    for f in ["pre.cbsf", "post.cbsf", "u.cbsf", "v.cbsf", "v.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
