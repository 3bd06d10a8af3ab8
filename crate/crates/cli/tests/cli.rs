use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_privtarget"))
}

#[test]
fn gen_data_writes_the_requested_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["--out", tmp.path().to_str().unwrap(), "gen-data", "--rows", "500"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = tmp.path().join("replica.csv");
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), path.display().to_string());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 501);
    assert!(text.starts_with("f0,f1,"));
}

#[test]
fn report_without_inputs_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin().args(["--out", out_dir.to_str().unwrap(), "report"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("report needs"));
    assert!(!out_dir.exists());
}

#[test]
fn bad_config_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "parallelism = 0\n").unwrap();
    let out = bin().args(["--config", cfg.to_str().unwrap(), "gen-data"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parallelism"));
}
