use std::process::Command;

use ltc_core::powerflow::{lindistflow_solve, Injections};
use ltc_core::scenario;

fn ltc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ltc"))
}

#[test]
fn powerflow_writes_bus_magnitudes() {
    let dir = tempfile::tempdir().unwrap();
    let inj_path = dir.path().join("inj.csv");
    std::fs::write(&inj_path, "bus,p,q\n4,-0.1,-0.05\n12,-0.2,-0.1\n").unwrap();
    let out = ltc()
        .args(["powerflow", "--feeder", "ieee13", "--solver", "linear", "--taps", "-2"])
        .arg("--injections")
        .arg(&inj_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bus,V"));
    let got: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();

    let topo = scenario::ieee13();
    let mut inj = Injections::zeros(12);
    inj.p[3] = -0.1;
    inj.q[3] = -0.05;
    inj.p[11] = -0.2;
    inj.q[11] = -0.1;
    let want = lindistflow_solve(&topo, &topo.ratios(&[-2]).unwrap(), &inj)
        .unwrap()
        .magnitudes();
    assert_eq!(got, want);
}

#[test]
fn malformed_injections_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let inj_path = dir.path().join("inj.csv");
    std::fs::write(&inj_path, "bus,p,q\n1,-0.1,0\n2,x,0\n").unwrap();
    let out = ltc()
        .args(["powerflow", "--feeder", "ieee13"])
        .arg("--injections")
        .arg(&inj_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("inj.csv:3:2"), "{err}");
}

#[test]
fn compare_writes_summary_and_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "D = 200\n[episode]\nwarmup_days = 1\nenv = \"linear\"\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = ltc()
        .args(["compare", "--feeder", "ieee13", "--seed", "3", "--sync-learn"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    for kind in ["rl", "exhaustive", "conventional"] {
        assert!(summary["rho"][kind].as_f64().unwrap() < 0.0);
        assert!(summary["tap_changes"][kind].is_u64());
        assert!(out_dir.join(format!("voltages_{kind}.csv")).exists());
        assert!(out_dir.join(format!("episode_{kind}.csv")).exists());
    }
    for table in ["taps.csv", "rewards.csv"] {
        let text = std::fs::read_to_string(out_dir.join(table)).unwrap();
        assert_eq!(text.lines().count(), 289);
    }
}

#[test]
fn simulate_accepts_a_profile_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[episode]\nwarmup_days = 1\nenv = \"linear\"\n").unwrap();
    let profile = dir.path().join("loads.csv");
    let status = ltc()
        .args(["loads", "--feeder", "ieee13", "--seed", "9"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&profile)
        .status()
        .unwrap();
    assert!(status.success());
    let out_dir = dir.path().join("out");
    let out = ltc()
        .args(["simulate", "--feeder", "ieee13", "--controller", "conventional"])
        .arg("--config")
        .arg(&cfg)
        .arg("--loads")
        .arg(&profile)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(out_dir.join("history_conventional.csv")).unwrap();
    assert!(history.starts_with("k,timestamp,pos_1,v_1,"));
    assert_eq!(history.lines().count(), 1 + 2 * 288);
}
