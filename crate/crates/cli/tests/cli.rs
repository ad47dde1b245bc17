use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointadapt::datakit::{read_annotations, write_annotations, AnnotationRecord, InstanceAnnotation};
use pointadapt::Mask;
use tempfile::TempDir;

fn pointadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    stdout(&o)
}

/// Workspace with a small dataset and a config that pretrains briefly.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(pointadapt(
        dir.path(),
        &[
            "generate-data",
            "--out",
            "data",
            "--train",
            "4",
            "--test",
            "3",
            "--size",
            "32",
        ],
    ));
    fs::write(
        dir.path().join("run.toml"),
        "[run]\nepochs = 1\n\n[model.pretrain]\nsteps = 30\nscenes = 8\n\n[data]\ndataset = \"data\"\n",
    )
    .unwrap();
    dir
}

fn record(id: &str, h: usize, w: usize, masks: &[Mask], probs: Option<&[Vec<f32>]>) -> AnnotationRecord {
    AnnotationRecord {
        image_id: id.into(),
        split: None,
        file: None,
        height: h,
        width: w,
        instances: masks
            .iter()
            .enumerate()
            .map(|(i, m)| InstanceAnnotation {
                probability: probs.map(|p| p[i].clone()),
                ..InstanceAnnotation::from_mask(i as u32 + 1, None, m)
            })
            .collect(),
    }
}

fn write_records(dir: &Path, name: &str, records: &[AnnotationRecord]) -> PathBuf {
    let path = dir.join(name);
    write_annotations(&path, records).unwrap();
    path
}

#[test]
fn generate_data_defaults_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(pointadapt(
        dir.path(),
        &["generate-data", "--train", "3", "--test", "2"],
    ));
    assert!(first.contains("written"), "{first}");
    assert!(dir.path().join("synthetic/manifest.json").exists());
    let again = ok(pointadapt(
        dir.path(),
        &["generate-data", "--train", "3", "--test", "2"],
    ));
    assert!(again.contains("unchanged"), "{again}");
    let conflict = pointadapt(
        dir.path(),
        &["generate-data", "--train", "3", "--test", "2", "--seed", "5"],
    );
    assert_eq!(conflict.status.code(), Some(3));
    assert!(stderr(&conflict).contains("different dataset"));
}

#[test]
fn generate_data_rejects_tiny_images() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        pointadapt(dir.path(), &["generate-data", "--size", "3"]).status.code(),
        Some(2)
    );
}

#[test]
fn train_with_zero_epochs_prints_direct() {
    let dir = workspace();
    let out = ok(pointadapt(dir.path(), &["train", "--config", "run.toml"]));
    assert!(out.starts_with("epoch 0"), "{out}");
    fs::write(
        dir.path().join("zero.toml"),
        "[run]\nepochs = 0\n\n[model.pretrain]\nsteps = 30\nscenes = 8\n\n[data]\ndataset = \"data\"\n",
    )
    .unwrap();
    let out = ok(pointadapt(dir.path(), &["train", "--config", "zero.toml"]));
    assert!(out.starts_with("direct  mIoU"), "{out}");
}

#[test]
fn train_requires_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointadapt(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.dataset"), "{}", stderr(&o));
}

#[test]
fn no_ssa_variant_records_zero_beta() {
    let dir = workspace();
    ok(pointadapt(
        dir.path(),
        &[
            "train",
            "--config",
            "run.toml",
            "--variant",
            "no_ssa",
            "--out",
            "ablate",
        ],
    ));
    let text = fs::read_to_string(dir.path().join("ablate/epochs.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["beta"], 0.0);
    assert_eq!(first["variant"], "no_ssa");
    assert!(first["mean_ssa"].is_null());
    assert!(dir.path().join("ablate/adapters.ckpt").exists());
    let config = fs::read_to_string(dir.path().join("ablate/config.toml")).unwrap();
    assert!(config.contains("variant = \"no_ssa\""), "{config}");
}

#[test]
fn eval_with_ground_truth_is_perfect() {
    let dir = workspace();
    let out = ok(pointadapt(
        dir.path(),
        &["eval", "--config", "run.toml", "--gt-as-prediction"],
    ));
    assert!(out.contains("100.00") && out.matches("100.00").count() == 2, "{out}");
}

#[test]
fn eval_is_repeatable() {
    let dir = workspace();
    let a = ok(pointadapt(dir.path(), &["eval", "--config", "run.toml", "--out", "a"]));
    let b = ok(pointadapt(dir.path(), &["eval", "--config", "run.toml", "--out", "b"]));
    assert_eq!(a, b);
    let pa = fs::read(dir.path().join("a/predictions.jsonl")).unwrap();
    let pb = fs::read(dir.path().join("b/predictions.jsonl")).unwrap();
    assert_eq!(pa, pb);
    let records = read_annotations(&dir.path().join("a/predictions.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .flat_map(|r| &r.instances)
        .all(|i| i.probability.is_some()));
}

#[test]
fn eval_rejects_four_points() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        pointadapt(dir.path(), &["eval", "--n-points", "4"]).status.code(),
        Some(2)
    );
}

#[test]
fn leakage_table() {
    let dir = tempfile::tempdir().unwrap();
    let a = Mask::from_vec(1, 3, vec![true, true, false]).unwrap();
    let b = Mask::from_vec(1, 3, vec![false, true, true]).unwrap();
    let c = Mask::from_vec(1, 3, vec![false, false, true]).unwrap();

    let overlap = write_records(dir.path(), "overlap.jsonl", &[record("x", 1, 3, &[a.clone(), b], None)]);
    let out = ok(pointadapt(
        dir.path(),
        &["leakage", "--predictions", overlap.to_str().unwrap()],
    ));
    assert!(out.contains("Dataset") && out.contains("1-Point"), "{out}");
    assert!(out.contains("33.3%"), "{out}");

    let clean = write_records(dir.path(), "clean.jsonl", &[record("x", 1, 3, &[a, c], None)]);
    let out = ok(pointadapt(
        dir.path(),
        &["leakage", "--predictions", clean.to_str().unwrap(), "--name", "toy"],
    ));
    assert!(out.contains("toy") && out.contains("0.0%"), "{out}");

    let empty = write_records(dir.path(), "empty.jsonl", &[record("x", 1, 3, &[], None)]);
    let o = pointadapt(dir.path(), &["leakage", "--predictions", empty.to_str().unwrap()]);
    assert!(ok(o.clone()).contains("0.0%"));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

fn blob_probs(h: usize, w: usize, cx: f32, level: f32) -> Vec<f32> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            if (y - 3.5).abs() < 3.0 && (x - cx).abs() < 2.5 {
                level
            } else {
                0.02
            }
        })
        .collect()
}

#[test]
fn refine_command() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (8, 8);
    let probs = vec![blob_probs(h, w, 2.5, 0.99), blob_probs(h, w, 4.5, 0.995)];
    let masks: Vec<Mask> = probs
        .iter()
        .map(|p| Mask::from_vec(h, w, p.iter().map(|&v| v > 0.5).collect()).unwrap())
        .collect();
    let input = write_records(dir.path(), "in.jsonl", &[record("img", h, w, &masks, Some(&probs))]);
    let before = ok(pointadapt(dir.path(), &["leakage", "--predictions", "in.jsonl"]));
    assert!(!before.contains(" 0.0%"), "{before}");

    ok(pointadapt(
        dir.path(),
        &["refine", "--input", input.to_str().unwrap(), "--output", "out.jsonl"],
    ));
    let after = ok(pointadapt(dir.path(), &["leakage", "--predictions", "out.jsonl"]));
    assert!(after.contains(" 0.0%"), "{after}");
    let refined = read_annotations(&dir.path().join("out.jsonl")).unwrap();
    assert!(refined[0].instances.iter().all(|i| i.bbox.is_some()));

    ok(pointadapt(
        dir.path(),
        &[
            "refine",
            "--input",
            "out.jsonl",
            "--output",
            "again.jsonl",
            "--skip-gate",
        ],
    ));
    assert_eq!(
        fs::read(dir.path().join("out.jsonl")).unwrap(),
        fs::read(dir.path().join("again.jsonl")).unwrap()
    );

    let strict = ok(pointadapt(
        dir.path(),
        &[
            "refine",
            "--input",
            "in.jsonl",
            "--output",
            "strict.jsonl",
            "--epsilon",
            "0.99",
        ],
    ));
    assert!(strict.contains("0 of 2 instances kept"), "{strict}");

    let blank = write_records(dir.path(), "blank.jsonl", &[record("none", h, w, &[], None)]);
    let out = ok(pointadapt(
        dir.path(),
        &[
            "refine",
            "--input",
            blank.to_str().unwrap(),
            "--output",
            "blank_out.jsonl",
        ],
    ));
    assert!(out.contains("0 of 0 instances kept"), "{out}");

    let o = pointadapt(
        dir.path(),
        &["refine", "--input", "out.jsonl", "--output", "nope.jsonl"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--skip-gate"), "{}", stderr(&o));
}

#[test]
fn print_config_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(pointadapt(dir.path(), &["train", "--print-config", "--seed", "7"]));
    for needle in [
        "seed = 7",
        "epochs = 5",
        "alpha = 20.0",
        "beta = 0.1",
        "tau = 0.05",
        "epsilon = 0.5",
        "[model.pretrain]",
    ] {
        assert!(out.contains(needle), "missing {needle} in\n{out}");
    }
}
