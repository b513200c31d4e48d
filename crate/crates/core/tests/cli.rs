use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fic-teleop"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn run_then_replay_reports_identical() {
    let dir = scratch("cli_run");
    let log = dir.join("nominal.csv");
    let out = bin()
        .args(["run", "--config"])
        .arg(configs().join("nominal.json"))
        .arg("--out")
        .arg(&log)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["passive"], true);

    let out = bin().args(["replay", "--log"]).arg(&log).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "identical");

    let mut bytes = std::fs::read(&log).unwrap();
    let n = bytes.len();
    bytes[n - 3] = if bytes[n - 3] == b'1' { b'2' } else { b'1' };
    let tampered = dir.join("tampered.csv");
    std::fs::write(&tampered, bytes).unwrap();
    let out = bin()
        .args(["replay", "--log"])
        .arg(&tampered)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn grid_writes_one_log_per_condition_and_analyze_reads_them() {
    let dir = scratch("cli_grid");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("impulse.json")).unwrap())
            .unwrap();
    cfg["duration"] = serde_json::json!(4.0);
    let cfg_path = dir.join("short.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = bin()
        .args(["grid", "--config"])
        .arg(&cfg_path)
        .args([
            "--delays",
            "0,0.5",
            "--rates",
            "1000,10",
            "--controller",
            "fic",
            "--out-dir",
        ])
        .arg(dir.join("grid"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let logs = std::fs::read_dir(dir.join("grid"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "csv")
        })
        .count();
    assert_eq!(logs, 4);

    let out = bin()
        .args(["analyze", "--log"])
        .arg(dir.join("grid/delay0.5_rate10.csv"))
        .arg("--out-dir")
        .arg(dir.join("analysis"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["energy.csv", "summary.json"] {
        assert!(dir.join("analysis").join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes_distinguish_config_and_analysis_failures() {
    let dir = scratch("cli_errors");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\"dt\": 0.001}").unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let not_a_log = dir.join("x.csv");
    std::fs::write(&not_a_log, "a,b\n1,2\n").unwrap();
    let out = bin()
        .args(["analyze", "--log"])
        .arg(&not_a_log)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
