use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusion-probe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_ablate_report_verify() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&data), "--samples", "120", "--seed", "4"]);
    let manifest = data.join("manifest.jsonl");
    let store = data.join("embeddings.femb");
    let table = ok(&[
        "ablate",
        "--manifest",
        s(&manifest),
        "--embeddings",
        s(&store),
        "--epochs",
        "15",
        "--out",
        s(&run),
    ]);
    for label in [
        "CLIP (image)",
        "CLIP (descriptions)",
        "CLIP (image & descriptions - CONCAT)",
        "CLIP (image & descriptions - MEAN)",
    ] {
        assert!(table.contains(label), "{table}");
    }
    for f in ["report.jsonl", "report.txt", "curves.csv", "model_MEAN.fprb", "trace_TEXT_ONLY.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let verified = ok(&["report", s(&run), "--verify", "--compare-reference"]);
    assert!(verified.contains("matches bit-for-bit"), "{verified}");
    assert!(verified.contains("reference  91.753"), "{verified}");
}

#[test]
fn config_file_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--samples", "60"]);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "manifest = {:?}\nimage_embeddings = {:?}\nstrategies = [\"IMAGE_ONLY\"]\nout_dir = \"unused\"\n\n[train]\nepochs = 4\n",
            data.join("manifest.jsonl"),
            data.join("embeddings.femb")
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--seed", "9", "--out", s(&run)]);
    let report = std::fs::read_to_string(run.join("report.jsonl")).unwrap();
    assert!(report.contains("\"seed\":9"));
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn errors_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = bin(&["ablate", "--manifest", s(&missing), "--embeddings", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--samples", "40"]);
    let out = bin(&[
        "train",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--embeddings",
        s(&data.join("embeddings.femb")),
        "--strategy",
        "concat",
        "--strategy",
        "mean",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exactly one strategy"));

    let out = bin(&["synth", "--out", s(&data), "--samples", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embed_with_file_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--samples", "30", "--dim", "512"]);
    let out_store = dir.path().join("images.femb");
    let msg = ok(&[
        "embed",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--adapter",
        "file",
        "--source",
        s(&data.join("embeddings.femb")),
        "--profile",
        "vit-b-32",
        "--out",
        s(&out_store),
    ]);
    assert!(msg.contains("30 image and 0 text embeddings (d=512)"), "{msg}");
    assert!(msg.contains("30 samples without cached descriptions"), "{msg}");

    // The 768-d profile does not fit a 512-d store: every sample fails.
    let msg = ok(&[
        "embed",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--adapter",
        "file",
        "--source",
        s(&data.join("embeddings.femb")),
        "--out",
        s(&dir.path().join("bad.femb")),
    ]);
    assert!(msg.contains("30 failures"), "{msg}");
}
