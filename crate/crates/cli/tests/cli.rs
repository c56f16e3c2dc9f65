use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_contour-refine");

/// A small network so the end-to-end commands finish in seconds.
const TINY: &str = r#"
version = 1

[model]
base_channels = 8
depth = 2
attention_heads = 2
attention_layers = 1
layer_repetition = 1
dropout = 0.0

[train]
batch_size = 3
epochs = 2
eval_every = 2
ema_window = 2
val_steps = 2
timesteps = 10
image_size = 32
seed = 3

[inference]
steps = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CONTOUR_REFINE_OUTPUT")
        .output()
        .expect("spawn contour-refine")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        ok(&[
            "generate",
            "--out",
            s(&data),
            "--n-train",
            "6",
            "--n-eval",
            "2",
            "--size",
            "32",
            "--seed",
            "5",
        ]);
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> String {
        let mut args = vec![
            "--threads",
            "1",
            "--config",
            s(&self.config),
            "train",
            "--data",
            s(&self.data),
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn generate_writes_manifest_and_refuses_reuse() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let stdout = ok(&[
        "generate",
        "--out",
        s(&out),
        "--n-train",
        "3",
        "--n-eval",
        "2",
        "--size",
        "32",
        "--severity",
        "0.3",
    ]);
    assert!(stdout.trim().ends_with("manifest.toml"));
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("split = \"train\"").count(), 3);
    assert_eq!(manifest.matches("split = \"eval\"").count(), 2);
    assert!(manifest.contains("severity = 0.3"));
    for sub in ["images", "masks", "guides"] {
        assert_eq!(fs::read_dir(out.join(sub)).unwrap().count(), 5, "{sub}");
    }
    assert_eq!(
        code(&[
            "generate",
            "--out",
            s(&out),
            "--n-train",
            "3",
            "--size",
            "32"
        ]),
        1
    );
    ok(&[
        "generate",
        "--out",
        s(&out),
        "--n-train",
        "2",
        "--n-eval",
        "1",
        "--size",
        "32",
        "--force",
    ]);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 3);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["generate", "--out", s(&out), "--severity", "2"]), 1);
    assert_eq!(code(&["train", "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["eval", "--out", s(&out), "--data", s(&out)]), 1);
    assert_eq!(code(&["--threads", "0", "generate", "--out", s(&out)]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(BIN)
        .args([
            "generate",
            "--n-train",
            "1",
            "--n-eval",
            "1",
            "--size",
            "32",
        ])
        .env("CONTOUR_REFINE_OUTPUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("generate/manifest.toml").exists());
}

#[test]
fn train_infer_eval_round_trip() {
    let fx = Fixture::new();
    let tdir = fx.path("train");
    let stdout = fx.train(&tdir, &[]);
    assert!(stdout.trim().ends_with("best_ema.ckpt"));
    for f in [
        "model.ckpt",
        "ema.ckpt",
        "best_ema.ckpt",
        "state.ckpt",
        "train_log.ndjson",
        "config.toml",
    ] {
        assert!(tdir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(tdir.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let resolved = fs::read_to_string(tdir.join("config.toml")).unwrap();
    assert!(resolved.contains("threshold = 3"), "{resolved}");

    let idir = fx.path("infer");
    ok(&[
        "--threads",
        "1",
        "infer",
        "--data",
        s(&fx.data),
        "--checkpoint",
        s(&tdir),
        "--out",
        s(&idir),
        "--steps",
        "2",
    ]);
    assert_eq!(fs::read_dir(idir.join("contours")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(idir.join("overlays")).unwrap().count(), 2);
    assert!(idir.join("infer.json").exists());

    let edir = fx.path("eval");
    let table = ok(&[
        "--threads",
        "1",
        "eval",
        "--data",
        s(&fx.data),
        "--checkpoint",
        s(&tdir),
        "--out",
        s(&edir),
        "--steps",
        "2",
    ]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("refined"));
    assert!(table.lines().nth(2).unwrap().starts_with("guide"));
    for f in [
        "metrics.json",
        "metrics.txt",
        "guide_metrics.json",
        "table.csv",
        "config.toml",
    ] {
        assert!(edir.join(f).exists(), "{f}");
    }

    // A checkpoint trained with 8 categories cannot serve a 5-category request.
    let bad = fx.path("bad");
    assert_eq!(
        code(&[
            "eval",
            "--data",
            s(&fx.data),
            "--checkpoint",
            s(&tdir),
            "--out",
            s(&bad),
            "--n-categories",
            "5"
        ]),
        1
    );

    // Re-running from the resolved config reproduces the outputs exactly.
    let again = fx.path("eval2");
    ok(&[
        "--threads",
        "1",
        "--config",
        s(&edir.join("config.toml")),
        "eval",
        "--out",
        s(&again),
    ]);
    for f in ["metrics.json", "table.csv"] {
        assert_eq!(
            fs::read(edir.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let fx = Fixture::new();
    let a = fx.path("a");
    let b = fx.path("b");
    fx.train(&a, &[]);
    fx.train(&b, &["--epochs", "1"]);
    fx.train(&b, &["--resume"]);
    for f in ["model.ckpt", "ema.ckpt", "best_ema.ckpt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(p.join("train_log.ndjson"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    // Resuming with a different optimizer setting is rejected.
    let out = run(&[
        "--threads",
        "1",
        "--config",
        s(&fx.config),
        "train",
        "--data",
        s(&fx.data),
        "--out",
        s(&b),
        "--resume",
        "--lr",
        "0.5",
    ]);
    assert!(!out.status.success());
}

#[test]
fn divergence_exits_with_three() {
    let fx = Fixture::new();
    let out = fx.path("div");
    let c = code(&[
        "--threads",
        "1",
        "--config",
        s(&fx.config),
        "train",
        "--data",
        s(&fx.data),
        "--out",
        s(&out),
        "--lr",
        "1e30",
    ]);
    assert_eq!(c, 3);
}
