//! End-to-end runs of the `brwlab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn brwlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brwlab")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn scans_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "scan.toml",
        "progeny = \"binary\"\nstep = \"srw\"\ndim = 2\nn = [8, 16, 32, 64]\nreplicates = 24\nseed = 5\n\
         delta_n = [24, 36]\nx = [0, 0]\n",
    );
    for cmd in ["scan-r", "scan-intersections"] {
        let one = ok(&brwlab(dir.path(), &[cmd, "--config", &cfg, "--threads", "1"]));
        let three = ok(&brwlab(dir.path(), &[cmd, "--config", &cfg, "--threads", "3"]));
        assert_eq!(one, three, "{cmd} differs across thread counts");
        assert!(one.starts_with(&format!("# brwlab {cmd} schema=1\n")));
        assert!(one.lines().any(|l| l.starts_with("# config_hash=")));
    }
}

#[test]
fn fit_reads_scan_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scan.csv");
    ok(&brwlab(
        dir.path(),
        &["scan-r", "--dim", "2", "--n", "8,16,32,64", "--replicates", "20", "--out", csv.to_str().unwrap()],
    ));
    let report = ok(&brwlab(dir.path(), &["fit", "--input", csv.to_str().unwrap(), "--model", "power"]));
    let v: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    let beta = v["estimate"].as_f64().unwrap();
    assert!(beta > 0.0 && beta < 1.5, "{beta}");
    assert_eq!(v["rows"], 4);
}

#[test]
fn resistance_of_an_embedded_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    ok(&brwlab(dir.path(), &["embed", "--dim", "3", "--n", "20", "--seed", "4", "--out", trace.to_str().unwrap()]));
    let from_file = ok(&brwlab(dir.path(), &["resistance", "--trace", trace.to_str().unwrap(), "--n", "20"]));
    let rows: Vec<&str> = from_file.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2, "{from_file}");
    let header: Vec<&str> = rows[0].split(',').collect();
    let values: Vec<&str> = rows[1].split(',').collect();
    let r: f64 = values[header.iter().position(|h| *h == "R").unwrap()].parse().unwrap();
    assert!(r > 0.0 && r <= 20.0, "{r}");

    let tree = ok(&brwlab(dir.path(), &["sample-tree", "--dim", "3", "--n", "20", "--seed", "4"]));
    assert!(tree.contains("vertex,parent,height,edge_key"));
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = brwlab(dir.path(), &["check"]);
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stdout));

    let loose = write_config(dir.path(), "loose.toml", "[solver]\nrel_tol = 1e-2\n");
    let out = brwlab(dir.path(), &["check", "--config", &loose]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));

    let skewed = write_config(
        dir.path(),
        "skewed.toml",
        "dim = 1\nstep = [{ x = [1], p = 0.6 }, { x = [-1], p = 0.4 }]\n",
    );
    let out = brwlab(dir.path(), &["check", "--config", &skewed]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));

    let out = brwlab(dir.path(), &["scan-r", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
}
