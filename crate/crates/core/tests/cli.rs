use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn crt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crt-assure"))
        .args(args)
        .env_remove("CRT_ASSURE_THREADS")
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn power_reports_the_continuous_sample_size() {
    let v = json_out(&crt(&["power", "--config", &cfg("speedy/power_continuous.json")]));
    assert_eq!(v["result"]["total_n"], 564);
    assert_eq!(v["meta"]["config"]["power"]["delta"], 30.0);
    assert_eq!(v["meta"]["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn binary_sample_size_records_its_convention() {
    let v = json_out(&crt(&["samplesize", "--config", &cfg("speedy/power_binary.json")]));
    assert!(v["result"]["convention"].as_str().unwrap().contains("per-arm"));
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = crt(&["power", "--config", "/no/such/scenario.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/scenario.json"));
}

#[test]
fn unknown_subcommand_prints_help() {
    let o = crt(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("samplesize-bayes"), "{err}");
}

#[test]
fn schema_errors_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"convention": "shape-rate", "outcome": "continuous", "colour": "red",
            "power": {"delta": 30, "sigma": -120, "rho": 0.01, "clusters": 150, "nbar": 4, "tails": 1}}"#,
    )
    .unwrap();
    let o = crt(&["power", "--config", path.to_str().unwrap()]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("colour") && err.contains("power.tails"), "{err}");
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("neg.json");
    std::fs::write(
        &path,
        r#"{"convention": "shape-rate", "outcome": "continuous",
            "power": {"delta": 30, "sigma": -120, "rho": 0.01, "clusters": 150, "nbar": 4}}"#,
    )
    .unwrap();
    assert_eq!(crt(&["power", "--config", path.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn stochastic_commands_need_a_seed() {
    for sub in ["assure", "samplesize-bayes"] {
        let o = crt(&[sub, "--config", &cfg("speedy/binary_average.json")]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    }
    let dir = tempfile::tempdir().unwrap();
    let o = crt(&["bench", "--config", &cfg("bench_quick.json"), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn entropy_seed_is_recorded() {
    let v = json_out(&crt(&[
        "assure",
        "--config",
        &cfg("speedy/binary_average.json"),
        "--seed-from-entropy",
        "--replicates",
        "10",
        "--n",
        "300",
    ]));
    assert!(v["meta"]["seed"].is_u64());
    assert_eq!(v["result"]["points"][0]["replicates"], 10);
}

#[test]
fn threads_env_var_is_honoured() {
    let o = Command::new(env!("CARGO_BIN_EXE_crt-assure"))
        .args(["assure", "--config", &cfg("speedy/binary_average.json"), "--seed", "1", "--replicates", "5", "--n", "300"])
        .env("CRT_ASSURE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--threads"));
}

#[test]
fn simulate_then_infer_with_both_engines() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("trial.csv");
    let data_s = data.to_str().unwrap();
    let conf = cfg("speedy/continuous_average.json");
    assert!(crt(&["simulate", "--config", &conf, "--seed", "9", "--n", "450", "--out", data_s]).status.success());
    let text = std::fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("# crt-assure"));
    assert!(text.lines().any(|l| l == "cluster,arm,y"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 451);

    let lap = json_out(&crt(&["infer", "--config", &conf, "--data", data_s, "--engine", "laplace"]));
    assert_eq!(lap["result"]["engine"], "laplace");
    assert!(lap["result"]["diagnostics"]["points_kept"].as_u64().unwrap() >= 1);
    let chain = dir.path().join("chain.csv");
    let mc = json_out(&crt(&[
        "infer", "--config", &conf, "--data", data_s, "--engine", "mcmc", "--samples", "4000", "--burnin", "500",
        "--seed", "2", "--chain", chain.to_str().unwrap(),
    ]));
    assert_eq!(mc["result"]["summary"]["samples"], 4000);
    let med = |v: &Value| v["result"]["summary"]["quantiles"][2]["value"].as_f64().unwrap();
    let sd_scale = (lap["result"]["summary"]["quantiles"][4]["value"].as_f64().unwrap()
        - lap["result"]["summary"]["quantiles"][0]["value"].as_f64().unwrap())
        / 3.92;
    assert!((med(&lap) - med(&mc)).abs() < 0.2 * sd_scale, "{} vs {}", med(&lap), med(&mc));
    let rows = std::fs::read_to_string(chain).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 4001);
}

#[test]
fn chain_output_requires_mcmc() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("trial.csv");
    let conf = cfg("speedy/binary_average.json");
    assert!(crt(&["simulate", "--config", &conf, "--seed", "1", "--n", "300", "--out", data.to_str().unwrap()]).status.success());
    let o = crt(&["infer", "--config", &conf, "--data", data.to_str().unwrap(), "--chain", "/tmp/x.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_long_and_summary_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = crt(&["bench", "--config", &cfg("bench_quick.json"), "--seed", "1", "--reps", "2", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    let body: Vec<&str> = records.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "scenario,engine,K,N,rep,error,seconds,dataset_hash");
    // 2 sizes x 2 reps x 2 methods.
    assert_eq!(body.len(), 1 + 8);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);
}

#[test]
fn resolved_config_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let v = json_out(&crt(&["power", "--config", &cfg("speedy/power_binary.json")]));
    let path = dir.path().join("resolved.json");
    std::fs::write(&path, serde_json::to_string(&v["meta"]["config"]).unwrap()).unwrap();
    let again = json_out(&crt(&["power", "--config", path.to_str().unwrap()]));
    assert_eq!(again["result"], v["result"]);
    assert_eq!(again["meta"]["config"], v["meta"]["config"]);
}

#[test]
fn samplesize_bayes_reports_unreachable_targets() {
    let o = crt(&[
        "samplesize-bayes", "--config", &cfg("speedy/binary_expert1.json"), "--seed", "1", "--replicates", "20",
        "--target", "0.99", "--cap", "600",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["result"]["n"].is_null());
    assert!(v["result"]["asymptote"].as_f64().unwrap() < 0.99);
}
