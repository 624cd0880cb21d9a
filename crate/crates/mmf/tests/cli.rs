use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmf::checkpoint;
use mmf::report::{self, Scope};
use mmf_core::ModelParams;

fn mmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmf")).current_dir(dir).env_remove("MMF_SEED").args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Ratings on a 1..5 scale from a rank-2 pattern plus id-dependent jitter.
fn write_ratings(path: &Path) {
    let mut s = String::new();
    for u in 1..=90u64 {
        for i in 1..=110u64 {
            let h = (u * 2654435761 + i * 40503) % 1000;
            if h < 280 {
                let a = ((u % 5) as f64 - 2.0) * ((i % 4) as f64 - 1.5) / 3.0 + ((u + i) % 3) as f64 / 2.0;
                let r = (3.0 + a + (h % 7) as f64 / 10.0).round().clamp(1.0, 5.0);
                s.push_str(&format!("{u}\t{i}\t{r}\t{}\n", 880000000 + h));
            }
        }
    }
    fs::write(path, s).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn prepared() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    write_ratings(&dir.join("u.data"));
    ok(mmf(
        &dir,
        &["prepare", "--input", "u.data", "--format", "movielens_tab", "--out-dir", "prep", "--seed", "7", "--rows", "10", "--cols", "10"],
    ));
    Fixture { _tmp: tmp, dir }
}

const SMALL: &[&str] = &[
    "--channels", "6,6", "--ff-hidden", "6", "--latent", "4", "--rows", "10", "--cols", "10", "--batch-size", "4",
    "--batches-per-epoch", "3", "--valid-episodes", "3", "--quiet",
];

fn train(dir: &Path, ckpt: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data-dir", "prep", "--checkpoint", ckpt];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(mmf(dir, &args))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn prepare_is_byte_reproducible_and_honours_the_seed_variable() {
    let f = prepared();
    let names: Vec<String> = read_dir_bytes(&f.dir.join("prep")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["meta_test.manifest", "test.tsv", "train.tsv", "valid.tsv"]);

    let out = ok(mmf(
        &f.dir,
        &["prepare", "--input", "u.data", "--format", "movielens_tab", "--out-dir", "again", "--seed", "7", "--rows", "10", "--cols", "10"],
    ));
    assert!(out.starts_with("ratings\t"), "{out}");
    assert!(out.contains("users\t90\titems\t110"), "{out}");
    assert_eq!(read_dir_bytes(&f.dir.join("prep")), read_dir_bytes(&f.dir.join("again")));

    let env = Command::new(env!("CARGO_BIN_EXE_mmf"))
        .current_dir(&f.dir)
        .env("MMF_SEED", "7")
        .args(["prepare", "--input", "u.data", "--format", "movielens_tab", "--out-dir", "env", "--seed", "99", "--rows", "10", "--cols", "10"])
        .output()
        .unwrap();
    ok(env);
    assert_eq!(read_dir_bytes(&f.dir.join("prep")), read_dir_bytes(&f.dir.join("env")));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let f = prepared();
    train(&f.dir, "init.ckpt", &["--epochs", "0"]);
    let ck = checkpoint::load(&f.dir.join("init.ckpt")).unwrap();
    assert_eq!(ck.params, ModelParams::init(&ck.config.model, 0).unwrap());
    assert_eq!(ck.best_epoch, 0);
    let log = fs::read_to_string(f.dir.join("init.ckpt.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch\ttrain_loss\tvalid_loss\n0\tNaN\t"));
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let f = prepared();
    train(&f.dir, "a.ckpt", &["--epochs", "2"]);
    train(&f.dir, "b.ckpt", &["--epochs", "2", "--workers", "3"]);
    let a = fs::read(f.dir.join("a.ckpt")).unwrap();
    assert_eq!(a, fs::read(f.dir.join("b.ckpt")).unwrap());
    assert_eq!(
        fs::read(f.dir.join("a.ckpt.log.tsv")).unwrap(),
        fs::read(f.dir.join("b.ckpt.log.tsv")).unwrap()
    );

    let eval = |out: &str, workers: &str| {
        ok(mmf(
            &f.dir,
            &["eval", "--checkpoint", "a.ckpt", "--data-dir", "prep", "--output", out, "--mf-latent", "4", "--mf-max-iters", "60", "--workers", workers],
        ))
    };
    let stdout = eval("r1.tsv", "1");
    eval("r2.tsv", "2");
    let r1 = fs::read(f.dir.join("r1.tsv")).unwrap();
    assert_eq!(r1, fs::read(f.dir.join("r2.tsv")).unwrap());
    assert!(stdout.contains("prior_product"));

    let rows = report::read(&f.dir.join("r1.tsv")).unwrap();
    for method in ["ours", "mean", "mf", "prior_product"] {
        let mine: Vec<_> = rows.iter().filter(|r| r.method == method).collect();
        assert_eq!(mine.len(), 11, "{method}");
        assert_eq!(mine.iter().filter(|r| r.scope == Scope::Mean).count(), 1);
        assert!(mine.iter().all(|r| r.test_mse.is_finite()));
    }

    let summary = ok(mmf(&f.dir, &["report", "--input", "r1.tsv"]));
    assert!(summary.lines().count() == 5, "{summary}");
}

#[test]
fn inner_step_sweep_and_zero_steps() {
    let f = prepared();
    train(&f.dir, "a.ckpt", &["--epochs", "1"]);
    ok(mmf(
        &f.dir,
        &["eval", "--checkpoint", "a.ckpt", "--data-dir", "prep", "--output", "s.tsv", "--sweep", "inner-steps", "--methods", "ours,prior_product"],
    ));
    let rows = report::read(&f.dir.join("s.tsv")).unwrap();
    let methods: Vec<&str> = rows.iter().filter(|r| r.scope == Scope::Mean).map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["ours@T=0", "ours@T=1", "ours@T=2", "ours@T=5", "ours@T=10", "ours@T=20", "prior_product"]);
    let t0: Vec<u64> = rows.iter().filter(|r| r.method == "ours@T=0").map(|r| r.test_mse.to_bits()).collect();
    let pp: Vec<u64> = rows.iter().filter(|r| r.method == "prior_product").map(|r| r.test_mse.to_bits()).collect();
    assert_eq!(t0, pp);

    ok(mmf(&f.dir, &["eval", "--checkpoint", "a.ckpt", "--data-dir", "prep", "--output", "z.tsv", "--sweep", "size", "--methods", "mean"]));
    let rows = report::read(&f.dir.join("z.tsv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.scope == Scope::Mean).count(), 5);
}

#[test]
fn mismatched_normalization_is_rejected() {
    let f = prepared();
    train(&f.dir, "a.ckpt", &["--epochs", "0"]);
    let manifest = f.dir.join("prep/meta_test.manifest");
    let text = fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "norm\t0e0\t1e0";
    fs::write(f.dir.join("other.manifest"), lines.join("\n")).unwrap();
    let out = mmf(&f.dir, &["eval", "--checkpoint", "a.ckpt", "--manifest", "other.manifest", "--output", "r.tsv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalization mismatch"));
    assert!(!f.dir.join("r.tsv").exists());
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.data"), "1\t2\t3\t4\n1\t2\tfive\t4\n").unwrap();
    let out = mmf(dir, &["prepare", "--input", "bad.data", "--format", "movielens_tab"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.data:2:"));

    fs::write(dir.join("empty.csv"), "").unwrap();
    assert!(!mmf(dir, &["prepare", "--input", "empty.csv", "--format", "csv"]).status.success());
    assert!(!mmf(dir, &["prepare", "--input", "missing", "--format", "csv"]).status.success());

    let out = mmf(dir, &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mmf(dir, &["prepare", "--input", "x", "--format", "json"]);
    assert_eq!(out.status.code(), Some(2));

    let bad_seed = Command::new(env!("CARGO_BIN_EXE_mmf"))
        .current_dir(dir)
        .env("MMF_SEED", "-3")
        .args(["prepare", "--input", "bad.data", "--format", "movielens_tab"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&bad_seed.stderr).contains("MMF_SEED"));
}
