//! End-to-end checks of the `fedate` binary: exit codes, output formats and
//! determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

use fedate::data::emit_csv;
use fedate::numerics::RngStream;
use fedate::scenarios::{generate, preset};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedate"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fedate_cli_tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn simulate_writes_deterministic_csv() {
    let dir = tmp_dir("simulate");
    let out1 = dir.join("a.csv");
    let out2 = dir.join("b.csv");
    for out in [&out1, &out2] {
        let st = run(&[
            "simulate",
            "--scenario",
            "homog-small",
            "--estimators",
            "dm,pool,meta-sw",
            "--reps",
            "20",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "same plan and seed must give byte-identical reports");
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("estimator,mean,variance,squared_bias,rmse"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn simulate_accepts_scenario_files_and_dumps_replicates() {
    let dir = tmp_dir("scenario_file");
    let cfg = preset("homog-small").unwrap();
    let path = dir.join("scenario.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.join("report.json");
    let dump = dir.join("reps.csv");
    let st = run(&[
        "simulate",
        "--scenario",
        path.to_str().unwrap(),
        "--estimators",
        "pool,1s-ivw",
        "--reps",
        "10",
        "--seed",
        "3",
        "--dump-reps",
        dump.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let dump_text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(dump_text.lines().count(), 1 + 10 * 2);
}

#[test]
fn estimate_reads_csv_and_reports_json() {
    let dir = tmp_dir("estimate");
    let fed = generate(&preset("homog-small").unwrap(), &mut RngStream::new(5, 0)).unwrap();
    let data = dir.join("data.csv");
    emit_csv(&fed, &data).unwrap();
    let st = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--estimator",
        "1s-ivw",
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["estimator"], "1s-ivw");
    let tau = payload["tau_hat"].as_f64().unwrap();
    assert!((tau - (-1.1)).abs() < 1.0, "tau_hat {tau} far from the generative truth");
    assert_eq!(payload["comm"]["rounds"], 2);

    // --adjusted maps to the adjusted variant
    let st = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--estimator",
        "gd",
        "--adjusted",
        "--fedavg",
        "T=300,E=1,B=full,eta=auto",
    ]);
    assert!(st.status.success());
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["estimator"], "gd-adj");
}

#[test]
fn advise_prints_the_diagram_leaf() {
    let st = run(&["advise", "--local-full-rank", "--same-x-dist", "--study-effects"]);
    assert!(st.status.success());
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["recommendation"][0], "gd-adj");
    assert_eq!(payload["recommendation"][1], "meta-ivw");
    assert_eq!(payload["dm_biased"], true);

    let st = run(&["advise"]);
    assert!(st.status.success());
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["recommendation"][0], "gather-more-data");
}

#[test]
fn bench_emits_exact_ledgers() {
    let st = run(&["bench", "--estimator", "1s-ivw", "--d", "10"]);
    assert!(st.status.success());
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["rounds"], 2);
    // per study: 2((d+1) + (d+1)^2) in round 1 plus (tau_k, n_k) in round 2
    assert_eq!(payload["floats_up_per_study"], 2 * (11 + 121) + 2);
    assert_eq!(payload["floats_down_per_study"], 22);

    let st = run(&["bench", "--estimator", "gd", "--d", "4", "--t", "50"]);
    assert!(st.status.success());
    let payload: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(payload["rounds"], 51);
}

#[test]
fn exit_codes_separate_validation_from_numerics() {
    // unknown preset: validation, exit 2
    let dir = tmp_dir("exit_codes");
    let st = run(&[
        "simulate",
        "--scenario",
        "no-such-preset",
        "--out",
        dir.join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(2));

    // treatment outside {0,1}: validation, exit 2
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "study_id,w,y,x1\n1,0,1.0,0.1\n1,2,2.0,0.2\n").unwrap();
    let st = run(&["estimate", "--data", bad.to_str().unwrap(), "--estimator", "dm"]);
    assert_eq!(st.status.code(), Some(2));

    // rank-deficient local fit: numerical, exit 3
    let thin = dir.join("thin.csv");
    let mut text = String::from("study_id,w,y,x1,x2\n");
    for i in 0..3 {
        text.push_str(&format!("1,1,{}.0,{}.5,{}\n", i, i, i * i));
        text.push_str(&format!("1,0,{}.0,{}.25,{}\n", i + 1, i, i + i));
    }
    // study 2 has a single treated row: local OLS cannot be full rank
    text.push_str("2,1,1.0,0.5,0.25\n");
    text.push_str("2,0,0.5,0.1,0.4\n");
    text.push_str("2,0,0.25,0.3,0.9\n");
    text.push_str("2,0,0.7,0.8,0.2\n");
    std::fs::write(&thin, text).unwrap();
    let st = run(&["estimate", "--data", thin.to_str().unwrap(), "--estimator", "meta-sw"]);
    assert_eq!(st.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&st.stderr));
}
