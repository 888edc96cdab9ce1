//! End-to-end subprocess tests of the command-line pipeline: artifact
//! layout, exit codes, flag/config precedence, and byte-identical reruns
//! from resolved-config snapshots.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_terradyn")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn terradyn")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn read_text(path: &Path) -> String {
    String::from_utf8(read(path)).expect("utf-8 artifact")
}

fn assert_same_bytes(a: &Path, b: &Path) {
    assert_eq!(read(a), read(b), "{} and {} differ", a.display(), b.display());
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train"])), 1, "missing required inputs");
    assert_eq!(code(&run(&["train", "--dataset", "/no/such/dir", "--out", "/tmp/x"])), 1);
    assert_eq!(code(&run(&["train", "--epochs", "abc"])), 1, "non-numeric flag");
    let out_of_range = run(&[
        "eval", "--buckets", "9", "--dataset", ".", "--model", ".", "--out", "/tmp/td_cli_b9",
    ]);
    assert_eq!(code(&out_of_range), 1, "bucket index past the last offset");
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["genworld", "--help"])), 0);
}

#[test]
fn pipeline_produces_artifacts_and_reruns_reproduce_bytes() {
    let root = std::env::temp_dir().join("td_cli_test");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let p = |name: &str| -> String { root.join(name).to_str().unwrap().to_string() };
    let world = p("world");
    let ds = p("ds");

    // World generation is pure: same seed, same snapshot.
    run_ok(&[
        "genworld", "--out", &world, "--seed", "5", "--extent", "90", "--classes", "4",
        "--n-vfm", "32", "--n-pca", "6", "--pca-samples", "200",
    ]);
    let world2 = p("world2");
    run_ok(&[
        "genworld", "--out", &world2, "--seed", "5", "--extent", "90", "--classes", "4",
        "--n-vfm", "32", "--n-pca", "6", "--pca-samples", "200",
    ]);
    assert_same_bytes(&root.join("world/world.txt"), &root.join("world2/world.txt"));
    let log = read_text(&root.join("world/run.log"));
    assert!(log.ends_with("status = ok\n"), "run log marks completion: {log}");

    run_ok(&[
        "dataset", "--world", &world, "--out", &ds, "--logs", "1", "--duration", "34",
        "--seed", "9",
    ]);
    for f in ["manifest.txt", "shard_000.bin", "config.txt", "run.log"] {
        assert!(root.join("ds").join(f).exists(), "dataset artifact {f}");
    }

    // Rerunning the stage from its own snapshot reproduces every byte.
    let ds2 = p("ds2");
    run_ok(&["dataset", "--config", &p("ds/config.txt"), "--out", &ds2]);
    assert_same_bytes(&root.join("ds/manifest.txt"), &root.join("ds2/manifest.txt"));
    assert_same_bytes(&root.join("ds/shard_000.bin"), &root.join("ds2/shard_000.bin"));
    assert_same_bytes(&root.join("ds/run.log"), &root.join("ds2/run.log"));

    // Zero epochs: initialized weights, header-only metrics.
    let m0 = p("m0");
    run_ok(&["train", "--dataset", &ds, "--out", &m0, "--mode", "none", "--epochs", "0"]);
    assert!(root.join("m0/model.bin").exists());
    assert_eq!(read_text(&root.join("m0/metrics.tsv")), "phase\tepoch\tloss\n");

    // Flag overrides the config file: epochs 1 in the file, 0 on the line.
    let mut snap = read_text(&root.join("m0/config.txt"));
    snap = snap.replace("epochs = 0", "epochs = 1");
    let edited = root.join("m0_edited.txt");
    std::fs::write(&edited, &snap).unwrap();
    let m0b = p("m0b");
    run_ok(&[
        "train", "--config", edited.to_str().unwrap(), "--out", &m0b, "--epochs", "0",
    ]);
    assert_same_bytes(&root.join("m0/model.bin"), &root.join("m0b/model.bin"));

    // A short real training run, reproducible from its snapshot.
    let m1 = p("m1");
    run_ok(&[
        "train", "--dataset", &ds, "--out", &m1, "--mode", "compressed", "--distance",
        "randomized", "--epochs", "1", "--batch-size", "8", "--n-pca", "6", "--n-encoder", "2",
        "--tbptt-steps", "64", "--delay-epochs", "2", "--delay-segments", "16",
    ]);
    let m1b = p("m1b");
    run_ok(&["train", "--config", &p("m1/config.txt"), "--out", &m1b]);
    assert_same_bytes(&root.join("m1/model.bin"), &root.join("m1b/model.bin"));
    assert_same_bytes(&root.join("m1/metrics.tsv"), &root.join("m1b/metrics.tsv"));

    // Evaluation: identical reports on repeat, tsv column count fixed.
    let e1 = p("e1");
    run_ok(&["eval", "--dataset", &ds, "--model", &p("m1/model.bin"), "--out", &e1,
        "--buckets", "0,3"]);
    let e2 = p("e2");
    run_ok(&["eval", "--config", &p("e1/config.txt"), "--out", &e2]);
    for f in ["reports.txt", "reports.tsv", "summary.txt", "errors.bin"] {
        assert_same_bytes(&root.join("e1").join(f), &root.join("e2").join(f));
    }
    let tsv = read_text(&root.join("e1/reports.tsv"));
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap().split('\t').count(), 10);
    assert_eq!(lines.count(), 2, "one row per requested bucket");

    // Planning demo: exported plan plus closed-loop drive artifacts.
    let pl = p("pl");
    run_ok(&[
        "plan", "--world", &world, "--model", &p("m1/model.bin"), "--out", &pl, "--goal",
        "10,0", "--n-samples", "8", "--horizon-steps", "30", "--max-steps", "40",
        "--replan-interval", "5", "--export-samples", "2",
    ]);
    for f in ["plan.traj", "sample_1.traj", "sample_2.traj", "drive.txt", "drive.bin", "run.log"] {
        assert!(root.join("pl").join(f).exists(), "plan artifact {f}");
    }
    let drive = read_text(&root.join("pl/drive.txt"));
    assert!(drive.contains("reached = "), "drive summary: {drive}");

    let _ = std::fs::remove_dir_all(&root);
}

#[test]
fn config_snapshot_from_wrong_command_is_rejected() {
    let root = std::env::temp_dir().join("td_cli_mismatch_test");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let snap = root.join("eval_config.txt");
    std::fs::write(&snap, "command = eval\nbuckets = 0\n").unwrap();
    let out = run(&["train", "--config", snap.to_str().unwrap(), "--out", "/tmp/x"]);
    assert_eq!(code(&out), 1);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("snapshot"), "actionable message, got: {msg}");
    let _ = std::fs::remove_dir_all(&root);
}
