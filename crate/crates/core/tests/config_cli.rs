use std::path::PathBuf;
use std::process::{Command, Stdio};

use nemo_sim::config::{ConfigError, ScenarioConfig};
use nemo_sim::experiment::CSV_HEADER;
use nemo_sim::proto::Protocol;

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nemo-sim"))
}

#[test]
fn shipped_scenarios_load() {
    let d = ScenarioConfig::load(&scenario_file("default.toml")).unwrap();
    assert_eq!(d, ScenarioConfig::default());
    let c = ScenarioConfig::load(&scenario_file("congested.toml")).unwrap();
    assert_eq!(c, ScenarioConfig::congested());
    let f = ScenarioConfig::load(&scenario_file("faults.toml")).unwrap();
    assert_eq!(f.faults.len(), 2);
}

#[test]
fn bad_files_are_rejected() {
    assert!(matches!(ScenarioConfig::from_toml("speed = 3"), Err(ConfigError::Parse(_))));
    assert!(matches!(ScenarioConfig::from_toml("dmr_speed_kmh = -1.0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(
        ScenarioConfig::from_toml("[[faults]]\nsignal = \"NOPE\"\nnth = 1"),
        Err(ConfigError::Invalid(_))
    ));
    assert!(matches!(
        ScenarioConfig::from_toml("[queues.red]\nmin_th = 20.0\nmax_th = 10.0"),
        Err(ConfigError::Invalid(_))
    ));
    assert!(matches!(
        ScenarioConfig::load(&scenario_file("missing.toml")),
        Err(ConfigError::Io { .. })
    ));
}

#[test]
fn cli_run_prints_one_row() {
    let out = bin()
        .args(["run", "--protocol", "nemo-bs", "--speed", "30", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("nemo-bs,predictive,30,3,2250,"));
}

#[test]
fn cli_sweep_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let status = bin()
        .args(["sweep", "--speeds", "30,60", "--protocols", "diff-nemo,diff-fh-nemo", "--threads", "2", "--out"])
        .arg(&csv)
        .arg("--config")
        .arg(scenario_file("congested.toml"))
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with(Protocol::DiffNemo.name()));

    let trace = dir.path().join("trace.tsv");
    let paths = dir.path().join("paths.tsv");
    let delays = dir.path().join("delays.tsv");
    let status = bin()
        .args(["run", "--trace"])
        .arg(&trace)
        .arg("--paths")
        .arg(&paths)
        .arg("--delays")
        .arg(&delays)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.lines().all(|l| l.split('\t').count() == 4));
    let p = std::fs::read_to_string(&paths).unwrap();
    assert_eq!(p.lines().count(), 2250);
    let d = std::fs::read_to_string(&delays).unwrap();
    assert!(d.lines().count() > 100);
    assert!(d.lines().skip(1).all(|l| l.split('\t').count() == 5));
}

#[test]
fn cli_reports_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "protocol = \"carrier-pigeon\"\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nemo-sim:"));
}
