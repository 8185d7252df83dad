use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "net.spatial_rank=2",
    "--set", "net.input_size=16,16",
    "--set", "net.base_channels=4",
    "--set", "net.depth=2",
    "--set", "net.feature_channels=4",
    "--set", "data.n_cases=10",
    "--set", "data.split=0.6,0.2,0.2",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=2",
];

fn ccsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccsd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CCSD_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path) {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = ccsd(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_requested_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = ccsd(&[
        "gen-data", "--out", out.to_str().unwrap(),
        "--set", "data.n_cases=8",
        "--set", "net.spatial_rank=2",
        "--set", "net.input_size=16,16",
        "--set", "data.split=0.5,0.25,0.25",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cases = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ccsd"))
        .count();
    assert_eq!(cases, 8);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
    assert!(manifest.starts_with("case_id,split,seed,path\n"));
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let o = ccsd(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccsd(&["train", "--out", dir.path().to_str().unwrap(), "--set", "net.width=3"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("--set") && err.contains("net.width") && err.contains("distill.temperature"), "{err}");
    assert_eq!(ccsd(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(ccsd(&["ablate", "--axis", "colour"]).status.code(), Some(1));
    let o = ccsd(&["report", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--run-dir"));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.epochs = zero\n").unwrap();
    let o = ccsd(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_tiny(&run);
    for f in ["run_record.json", "train_log.csv", "checkpoint.bin", "checkpoint.bin.meta", "eval_table.csv", "robustness_curve.csv", "aurc.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let table = fs::read_to_string(run.join("eval_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 15 + 1);
    assert!(lines[16].starts_with("Avg.,"));
    // Avg. row is the column mean of the 15 combination rows
    let cols: Vec<Vec<f64>> = lines[1..16]
        .iter()
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let avg: Vec<f64> = lines[16].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    for (r, a) in avg.iter().enumerate() {
        let m = cols.iter().map(|c| c[r]).sum::<f64>() / 15.0;
        assert!((m - a).abs() < 1e-12);
    }

    // report regenerates byte-identical curve files
    let rep = dir.path().join("report");
    let o = ccsd(&["report", "--run-dir", run.to_str().unwrap(), "--out", rep.to_str().unwrap(), "--render-plots"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["eval_table.csv", "robustness_curve.csv", "aurc.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(rep.join(f)).unwrap(), "{f}");
    }
    assert!(rep.join("robustness_curve.svg").exists());
    let curve = fs::read_to_string(rep.join("robustness_curve.csv")).unwrap();
    let xs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(xs, ["1", "2", "3", "4"]);

    // eval of the stored checkpoint reproduces the training-time test table
    let ev = dir.path().join("eval");
    let o = ccsd(&["eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ev.join("eval_table.csv")).unwrap(), table);

    // a mismatching network config is refused
    let o = ccsd(&[
        "eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(),
        "--out", ev.to_str().unwrap(),
        "--config", run.join("config.txt").to_str().unwrap(),
        "--set", "net.feature_channels=8",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a);
    train_tiny(&b);
    for f in ["train_log.csv", "eval_table.csv", "robustness_curve.csv", "aurc.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--seed", "5", "--set", "seed=3"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_ccsd"))
        .args(&args)
        .env("RUST_LOG", "warn")
        .env("CCSD_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "seed = 5"));
    let out2 = dir.path().join("e");
    let mut args = vec!["train", "--out", out2.to_str().unwrap(), "--set", "seed=3"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_ccsd")).args(&args).env("RUST_LOG", "warn").env("CCSD_SEED", "4").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let cfg = fs::read_to_string(out2.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "seed = 4"));
}
