use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ld3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ld3")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const SMALL: &str = "train.count = 10\ntrain.epochs_phase1 = 1\ntrain.epochs_phase2 = 1\nteacher.nfe = 30\n\
eval.seeds = 0\neval.nfes = 4\neval.n_eval = 10\neval.solvers = dpmpp:2\neval.r_values = 0.5\n";

#[test]
fn gen_train_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();

    let out = ld3(&["gen-data", "--config", &cfg, "--out", &p("d.bin")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::metadata(p("d.bin")).unwrap().len(), 32 + 10 * 48);

    let out = ld3(&["train", "--config", &cfg, "--data", &p("d.bin"), "--out", &p("run"), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "metrics.csv", "config.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }

    let ck = p("run/checkpoint.json");
    let out = ld3(&["sample", "--config", &cfg, "--checkpoint", &ck, "--n", "4", "--out", &p("s.csv")]);
    assert!(out.status.success());
    let csv = fs::read_to_string(p("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next(), Some("x0,x1"));

    let out = ld3(&["bound", "--config", &cfg, "--checkpoint", &ck, "--out", &p("b.json")]);
    assert!(out.status.success());
    assert!(fs::read_to_string(p("b.json")).unwrap().contains("term3_estimate"));
}

#[test]
fn bench_and_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();

    let out = ld3(&["bench", "--config", &cfg, "--out", &p("bench.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bench = fs::read_to_string(p("bench.csv")).unwrap();
    assert_eq!(bench.lines().next(), Some("method,solver,nfe,teacher_dist,rmsd,w1,seed"));
    // Four heuristics plus LD3, one solver, one NFE, one seed.
    assert_eq!(bench.lines().count(), 1 + 5);

    assert!(ld3(&["gen-data", "--config", &cfg, "--out", &p("d.bin")]).status.success());
    let out = ld3(&["sweep-r", "--config", &cfg, "--data", &p("d.bin"), "--out", &p("sweep.csv")]);
    assert!(out.status.success());
    let sweep = fs::read_to_string(p("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0.5,"));
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    assert!(ld3(&["gen-data", "--config", &cfg, "--out", &p("a.bin")]).status.success());
    assert!(ld3(&["gen-data", "--config", &cfg, "--out", &p("b.bin")]).status.success());
    assert!(ld3(&["gen-data", "--config", &cfg, "--seed", "9", "--out", &p("c.bin")]).status.success());
    let read = |s: &str| fs::read(p(s)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "train.no_such_key = 1\n");
    let out = ld3(&["gen-data", "--config", &bad, "--out", "/dev/null"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.no_such_key"));

    let out = ld3(&["train", "--data", "/nonexistent/d.bin", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());

    let out = ld3(&["frobnicate"]);
    assert!(!out.status.success());
}
