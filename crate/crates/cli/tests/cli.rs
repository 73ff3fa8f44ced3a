use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rsnlabel::nifti::{write_stack, write_volume, ComponentStack, Volume3D};

fn rsnlabel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsnlabel"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rsnlabel(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = rsnlabel(dir, args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

fn synth_and_ingest(dir: &Path, subjects: usize) {
    let n = subjects.to_string();
    ok(dir, &["synth", "--subjects", &n, "--seed", "5", "--out", "stacks"]);
    ok(dir, &["ingest", "--in", "stacks", "--out", "data.rsnd", "--standardize"]);
}

#[test]
fn synth_then_ingest_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(dir, &["synth", "--subjects", "20", "--grid", "24,24,24", "--out", "s"]);
    assert!(out.starts_with("subjects=20"));
    let files: Vec<_> = fs::read_dir(dir.join("s"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".nii"))
        .collect();
    assert_eq!(files.len(), 20);
    let stack = rsnlabel::nifti::read_stack(files[0].path()).unwrap();
    assert_eq!(stack.volumes.len(), 100);
    assert!(dir.join("s/manifest.json").exists());

    let out = ok(dir, &["ingest", "--in", "s", "--out", "d.rsnd"]);
    assert_eq!(out.trim(), "subjects=20, samples=2000, classes=58");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("d.rsnd.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 20);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--subjects", "2", "--seed", "9", "--out", "a"]);
    ok(dir, &["synth", "--subjects", "2", "--seed", "9", "--out", "b"]);
    ok(dir, &["synth", "--subjects", "2", "--seed", "10", "--out", "c"]);
    let read = |d: &str| fs::read(dir.join(d).join("sub-000.nii")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn ingest_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::create_dir(dir.join("empty")).unwrap();
    let (code, line) = fails(dir, &["ingest", "--in", "empty", "--out", "d.rsnd"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("EmptyInput:"), "{line}");

    ok(dir, &["synth", "--subjects", "1", "--out", "mixed"]);
    ok(dir, &["synth", "--subjects", "1", "--grid", "25,24,24", "--out", "other"]);
    fs::rename(dir.join("other/sub-000.nii"), dir.join("mixed/sub-zzz.nii")).unwrap();
    let (code, line) = fails(dir, &["ingest", "--in", "mixed", "--out", "d.rsnd"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("GridMismatch:"), "{line}");
}

#[test]
fn train_evaluate_predict_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_and_ingest(dir, 5);

    // default config, short run
    let out = ok(dir, &["train", "--data", "data.rsnd", "--epochs", "3", "--out", "full.rsnm"]);
    assert!(out.starts_with("epochs=3"), "{out}");
    let csv = fs::read_to_string(dir.join("full.epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let model = rsnlabel::mlp::load_model(dir.join("full.rsnm")).unwrap();
    assert_eq!(model.config.shape_string(), "13824-200-200-200-58");
    assert_eq!((model.config.dropout_rate, model.config.dropout_after_layer), (0.66, 2));
    assert_eq!(model.config.learning_rate, 1e-5);

    let args = [
        "--layers", "1", "--nodes", "20", "--dropout", "0", "--lr", "0.1", "--init-gain", "0.1", "--epochs", "15",
        "--split", "0.6,0,0.4", "--seed", "2",
    ];
    let mut train = vec!["train", "--data", "data.rsnd", "--out", "small.rsnm"];
    train.extend_from_slice(&args);
    ok(dir, &train);
    assert!(dir.join("small.rsnm.manifest.json").exists());

    let out = ok(
        dir,
        &["evaluate", "--model", "small.rsnm", "--data", "data.rsnd", "--split", "0.6,0,0.4", "--seed", "2", "--out", "ev"],
    );
    assert!(out.starts_with("accuracy="), "{out}");
    assert!(out.contains("samples=200"), "{out}");
    for f in ["ev_confusion_counts.csv", "ev_confusion.ppm", "ev_confusion.csv", "ev_misclassified.tsv", "ev.manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let counts = fs::read_to_string(dir.join("ev_confusion_counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 59);

    let out = ok(
        dir,
        &["predict", "--model", "small.rsnm", "--in", "stacks/sub-004.nii", "--standardize", "--topk", "3", "--out", "p.tsv"],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 100);
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], i.to_string());
        let top: Vec<&str> = cols[2].split(' ').collect();
        assert_eq!(top.len(), 3);
        let probs: Vec<f64> = top
            .iter()
            .map(|t| {
                let (label, p) = t.rsplit_once(':').unwrap();
                assert_eq!(label, label.to_lowercase());
                assert_eq!(p.len(), 5, "{t}");
                p.parse().unwrap()
            })
            .collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(top[0].rsplit_once(':').unwrap().0, cols[1].to_lowercase());
    }
    assert_eq!(fs::read_to_string(dir.join("p.tsv")).unwrap(), out);

    ok(dir, &["synth", "--subjects", "1", "--grid", "26,24,24", "--out", "wide"]);
    let (code, line) = fails(dir, &["predict", "--model", "small.rsnm", "--in", "wide/sub-000.nii"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("DimensionMismatch:"), "{line}");
    assert!(line.contains("13824") && line.contains("26x24x24"), "{line}");
}

#[test]
fn zero_learning_rate_leaves_accuracy_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_and_ingest(dir, 3);
    ok(
        dir,
        &["train", "--data", "data.rsnd", "--lr", "0", "--dropout", "0", "--layers", "1", "--nodes", "8", "--epochs", "4", "--out", "m.rsnm"],
    );
    let csv = fs::read_to_string(dir.join("m.epochs.csv")).unwrap();
    let acc: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(acc.len(), 4);
    assert!(acc.iter().all(|a| *a == acc[0]), "{acc:?}");
    let init = rsnlabel::mlp::MlpModel::init(&rsnlabel::mlp::load_model(dir.join("m.rsnm")).unwrap().config).unwrap();
    assert_eq!(rsnlabel::mlp::load_model(dir.join("m.rsnm")).unwrap(), init);
}

#[test]
fn ablate_small_grid_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_and_ingest(dir, 3);
    let args = |out: &'static str| {
        vec![
            "ablate", "--data", "data.rsnd", "--layers-list", "1,2", "--nodes-list", "2,8", "--k", "2", "--epochs", "2", "--lr", "0.05",
            "--init-gain", "0.1", "--out", out,
        ]
    };
    ok(dir, &args("a"));
    ok(dir, &args("b"));
    let a = fs::read_to_string(dir.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 3);
    assert!(a.starts_with("layers,2,8\n"));
    assert!(dir.join("a.ppm").exists() && dir.join("a_folds.csv").exists() && dir.join("a.manifest.json").exists());
    let folds = fs::read_to_string(dir.join("a_folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 1 + 4 * 2);
}

#[test]
fn project_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let full = Volume3D::from_fn([45, 54, 45], |x, y, z| ((x + 2 * y + 3 * z) % 7) as f32).unwrap();
    let zeros = Volume3D::zeros([45, 54, 45]);
    write_stack(&ComponentStack::new("s", vec![full, zeros]).unwrap(), dir.join("s.nii")).unwrap();

    let out = ok(dir, &["project", "--in", "s.nii", "--component", "0", "--out", "a.ppm"]);
    assert_eq!(out.trim(), "width=54, height=54");
    let img = fs::read(dir.join("a.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n54 54\n255\n"));

    ok(dir, &["project", "--in", "s.nii", "--component", "1", "--out", "b.ppm"]);
    let img = fs::read(dir.join("b.ppm")).unwrap();
    assert!(img[b"P6\n54 54\n255\n".len()..].iter().all(|&b| b == 0));

    let (code, line) = fails(dir, &["project", "--in", "s.nii", "--component", "2", "--out", "c.ppm"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("BadComponentIndex:"), "{line}");

    write_volume(&Volume3D::zeros([4, 4, 4]), dir.join("v.nii")).unwrap();
    ok(dir, &["project", "--in", "v.nii", "--out", "v.ppm"]);
}

#[test]
fn bench_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(dir, &["bench", "--shape", "1000,20,5", "--n", "1"]);
    assert!(out.contains("samples=1") && out.contains("throughput="), "{out}");
    let tp: f64 = out.split("throughput=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(tp.is_finite() && tp > 0.0);
    assert!(dir.join("bench.txt.manifest.json").exists());

    let (code, line) = fails(dir, &["bench", "--n", "5"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("UsageError:"), "{line}");
}

#[test]
fn missing_files_are_named_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, line) = fails(tmp.path(), &["train", "--data", "nope.rsnd", "--out", "m.rsnm"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("IoFailure:"), "{line}");
    let (code, line) = fails(tmp.path(), &["train", "--data", "x", "--layers", "many", "--out", "m"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("UsageError:"), "{line}");
}
