//! The binary end to end on a tiny configuration.

use std::path::Path;
use std::process::Command;

use agglomerator::config::{Profile, TrainConfig};
use agglomerator::interpret::Dump;
use agglomerator_cli::read_manifest;

const TINY: &[&str] = &[
    "--override",
    "d=8",
    "--override",
    "f1=16",
    "--override",
    "levels=2",
    "--override",
    "steps=2",
    "--override",
    "batch_size=32",
    "--override",
    "subset=128",
    "--override",
    "test_subset=1000",
    "--override",
    "epochs_pretrain=1",
    "--override",
    "epochs_train=1",
];

fn mnist_present() -> bool {
    let root = std::env::var("AGGLOMERATOR_DATA").unwrap_or_else(|_| "data".into());
    Path::new(&root).join("mnist/t10k-images-idx3-ubyte").exists()
}

fn agglomerator(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_agglomerator"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .output()
        .unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr),
    )
}

fn accuracy(text: &str) -> f64 {
    let rest = text.split("test accuracy ").nth(1).expect("accuracy line");
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = TrainConfig::from_file(Profile::Desk, &path).unwrap();
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 1);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = agglomerator(&["pretrain", "--config", "/no/such.cfg"], dir.path());
    assert_eq!(code, 2, "{msg}");
    assert!(msg.contains("not found"), "{msg}");
    assert_eq!(agglomerator(&["pretrain", "--override", "bogus_key=3"], dir.path()).0, 2);
    assert_eq!(agglomerator(&["unknown-command"], dir.path()).0, 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(agglomerator(&["eval"], dir.path()).0, 1);
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    if !mnist_present() {
        eprintln!("MNIST not found; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let (code, msg) = agglomerator(&["pretrain"], out);
    assert_eq!(code, 0, "{msg}");
    let (code, msg) = agglomerator(&["eval", "--checkpoint", out.join("pretrained").to_str().unwrap()], out);
    assert_eq!(code, 0, "{msg}");
    let chance = accuracy(&msg);
    assert!((chance - 0.1).abs() <= 0.03, "untrained head accuracy {chance}");

    let (code, msg) = agglomerator(&["train"], out);
    assert_eq!(code, 0, "{msg}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let phases: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["pretrain", "train", "eval"]);

    let manifest = read_manifest(&out.join("manifest-train.txt")).unwrap();
    for key in ["source_digest", "config_hash", "seed", "checkpoint.input", "checkpoint.model", "result.accuracy"] {
        assert!(manifest.iter().any(|(k, _)| k == key), "manifest lacks {key}");
    }
    let text = std::fs::read_to_string(out.join("manifest-train.txt")).unwrap();
    let config = text.split("[config]\n").nth(1).unwrap();
    let mut replay = TrainConfig::profile(Profile::Desk);
    replay.apply_text(config, Path::new("manifest")).unwrap();
    assert_eq!(replay.d, 8);
    assert_eq!(replay.to_text(), config);

    let (code, msg) = agglomerator(&["export-islands", "--samples", "5"], out);
    assert_eq!(code, 0, "{msg}");
    let islands = Dump::read(&out.join("islands.bin")).unwrap();
    assert_eq!(islands.get("fields").unwrap().shape, [5, 7, 7, 2, 2]);
    assert_eq!(islands.get("agreement").unwrap().shape, [5, 2]);
    assert!(islands.get("fields").unwrap().data.iter().all(|v| v.is_finite()));
    assert_eq!(std::fs::read_to_string(out.join("islands.csv")).unwrap().lines().count(), 6);

    let (code, msg) = agglomerator(&["export-latent", "--samples", "50"], out);
    assert_eq!(code, 0, "{msg}");
    let latent = Dump::read(&out.join("latent.bin")).unwrap();
    assert_eq!(latent.get("features").unwrap().shape, [50, 16]);
    assert_eq!(latent.get("pca").unwrap().shape, [50, 2]);
    assert!(latent.meta_value("config_hash").is_some());
}
