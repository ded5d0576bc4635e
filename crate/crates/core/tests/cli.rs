use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn railtrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_railtrace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_topology_exits_1_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(dir.path().join("afc.csv"), "passenger_id,entry_station,entry_time,exit_station,exit_time\n").unwrap();
    fs::write(dir.path().join("avl.csv"), "train_id,line,direction,station,arrival_time,departure_time\n").unwrap();
    fs::write(
        &cfg,
        r#"{"inputs": {"afc": "afc.csv", "avl": "avl.csv", "topology": "no_such_topology.json"}}"#,
    )
    .unwrap();
    let out = railtrace(&["infer", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_topology.json"), "{err}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(railtrace(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(railtrace(&["infer", "--seed", "abc"]).status.code(), Some(1));
    assert_eq!(railtrace(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"klem": {"topk": 3, "bogus": 1}}"#).unwrap();
    let out = railtrace(&["infer", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_afc_header_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(railtrace(&["simulate", "--out", p(&sim)]).status.success());
    fs::write(sim.join("afc.csv"), "id,from,to\n1,CY,S4\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"inputs": {"afc": "sim/afc.csv", "avl": "sim/avl.csv", "topology": "sim/topology.json"}}"#,
    )
    .unwrap();
    let out = railtrace(&["infer", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let files = [
        "afc.csv",
        "avl.csv",
        "ground_truth.csv",
        "itineraries.csv",
        "itineraries.jsonl",
        "models.json",
        "metrics.json",
        "manifest.json",
    ];
    let mut runs = Vec::new();
    for threads in ["4", "4", "1"] {
        let o = railtrace(&["evaluate", "--seed", "5", "--threads", threads, "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    for (i, f) in files.iter().enumerate() {
        assert!(runs[0][i] == runs[1][i], "{f} differs between runs");
        // the manifest hashes the config, which records the thread count
        if *f != "manifest.json" {
            assert!(runs[0][i] == runs[2][i], "{f} depends on the thread count");
        }
    }
}

#[test]
fn different_seed_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(railtrace(&["simulate", "--seed", "1", "--out", p(&a)]).status.success());
    assert!(railtrace(&["simulate", "--seed", "2", "--out", p(&b)]).status.success());
    assert_ne!(fs::read(a.join("afc.csv")).unwrap(), fs::read(b.join("afc.csv")).unwrap());
}

#[test]
fn infer_from_simulated_files_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(railtrace(&["simulate", "--out", p(&sim)]).status.success());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"inputs": {"afc": "sim/afc.csv", "avl": "sim/avl.csv", "topology": "sim/topology.json",
                       "ground_truth": "sim/ground_truth.csv"},
            "output_dir": "run"}"#,
    )
    .unwrap();
    let out = railtrace(&["report", "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy"), "{stdout}");
    let run = dir.path().join("run");
    for f in [
        "itineraries.csv",
        "rejects.csv",
        "models.json",
        "metrics.json",
        "report_transfer_hist.csv",
        "report_left_behind.csv",
        "report_em_trace.csv",
        "klem_rounds_CY__BXQ.csv",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(run.join("itineraries.csv")).unwrap();
    assert!(header.starts_with(
        "passenger_id,segment,train_id,board_station,board_time,alight_station,alight_time,access_s,egress_s,transfer_s,left_behind,confidence,flags\n"
    ));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.to_string().contains("afc.csv"));
}
