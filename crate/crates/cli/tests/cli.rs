use std::path::Path;
use std::process::{Command, Output};

fn gendd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gendd")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn verify_theorem_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = gendd(&["--out", dir.path().to_str().unwrap(), "verify-theorem", "--scenarios", "200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    for f in ["theorem_buckets.csv", "theorem_summary.csv", "theorem_residual.svg"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
}

#[test]
fn full_contraction_misses_the_theorem_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = gendd(&["--out", dir.path().to_str().unwrap(), "verify-theorem", "--scenarios", "100", "--lambda", "0"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn malformed_and_invalid_overrides_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in ["gendd.lambda", "gendd.lambda=2", "gendd.nonsense=1", "optimizer.kind=rmsprop"] {
        let o = gendd(&["--out", out, "--set", bad, "train", "--steps", "1"]);
        assert_eq!(code(&o), 2, "{bad}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&gendd(&["ablate", "sweep=width", "values=1"])), 2);
    assert_eq!(code(&gendd(&["no-such-verb"])), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let o = gendd(&["eval", "--checkpoint", "/nonexistent/final.ckpt"]);
    assert_eq!(code(&o), 1);
}

fn metrics(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("metrics.csv")).unwrap()
}

#[test]
fn same_seed_training_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gendd(&[
            "--out",
            out.to_str().unwrap(),
            "--deterministic",
            "--set",
            "dataset.val_limit=32",
            "--seed",
            "3",
            "train",
            "--steps",
            "16",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(metrics(&a), metrics(&b));
    assert!(a.join("effective_config.toml").exists());

    let ckpt = a.join("final.ckpt");
    let o = gendd(&["--out", dir.path().join("eval").to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("eval top1"));
}
