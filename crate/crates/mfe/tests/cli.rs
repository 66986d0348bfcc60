use std::path::Path;
use std::process::{Command, Output};

use mfe::bench_cli::{read_csv, CSV_HEADER};

fn mfe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfe"))
        .args(args)
        .output()
        .expect("spawn mfe")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SWEEP: &str = "# example 4, three omegas\nexample = 4\nomegas = 10000, 100, 1000\norders = 0, 1, 2\nrecord_runtime = false\n";

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.cfg", SWEEP);
    let out = dir.path().join("errors.csv");
    let o = mfe(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let recs = read_csv(text.as_bytes()).unwrap();
    assert_eq!(recs.len(), 9);
    let keys: Vec<(u32, f64)> = recs.iter().map(|r| (r.r, r.omega)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    assert_eq!(keys, sorted);
    assert!(recs.iter().all(|r| r.runtime_ms == 0 && r.t == 1.0));
    // R = 1 decays roughly like ω^{-3/2} on this example
    let f = recs
        .iter()
        .find(|r| r.r == 1)
        .unwrap()
        .fitted_order
        .unwrap();
    assert!((f - 1.5).abs() < 0.15, "{f}");
}

#[test]
fn output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.cfg", SWEEP);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let o = mfe(&["run", "--config", &cfg, "--threads", threads]);
        assert!(o.status.success());
        outputs.push(o.stdout);
    }
    let again = mfe(&["run", "--config", &cfg, "--threads", "3"]);
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], again.stdout);
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "example = 4\nspeed = fast\n");
    let o = mfe(&["run", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = mfe(&[
        "run",
        "--config",
        dir.path().join("missing.cfg").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = mfe(&["table", "9"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mfe(&[
        "run",
        "--config",
        &write_config(dir.path(), "t.cfg", SWEEP),
        "--threads",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table_prints_csv_and_comparison() {
    let o = mfe(&["table", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = read_csv(&o.stdout[..]).unwrap();
    assert_eq!(recs.len(), 12);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("omega =   1000") && err.contains("8.41e-6"),
        "{err}"
    );
}
