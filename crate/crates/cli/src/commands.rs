use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rsnlabel::ablation::{emit_grid, run_grid, GridSpec};
use rsnlabel::dataset::{self, assemble, read_cache, split_by_subject, write_cache, Dataset, SplitSpec};
use rsnlabel::eval::{self, confusion_heatmap, evaluate as score, format_top, topk};
use rsnlabel::mlp::{self, load_model, save_model, MlpConfig, MlpModel, MODEL_VERSION};
use rsnlabel::nifti::{read_stack, write_stack};
use rsnlabel::synth::{synth_generate, SynthSpec};
use rsnlabel::taxonomy::{Taxonomy, WeightScheme};
use rsnlabel::volume::{rgb_composite, standardize_in_place, write_ppm};

use crate::manifest::{beside, RunManifest};
use crate::{AblateArgs, BenchArgs, EvaluateArgs, Failure, IngestArgs, PredictArgs, ProjectArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|v| v.trim().parse::<T>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::usage(format!("--{what} expects comma-separated numbers, got {s:?}")))
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy, Failure> {
    match path {
        Some(p) => Ok(Taxonomy::parse(&fs::read_to_string(p)?)?),
        None => Ok(Taxonomy::bundled()),
    }
}

fn split_spec(s: &str, seed: u64) -> Result<SplitSpec, Failure> {
    match list::<f64>(s, "split")?.as_slice() {
        &[a, b, c] => Ok(SplitSpec::new(a, b, c, seed)?),
        _ => Err(Failure::usage(format!("--split needs three fractions, got {s:?}"))),
    }
}

fn weight_scheme(s: &str) -> Result<WeightScheme, Failure> {
    s.parse().map_err(Failure::usage)
}

fn record_config(m: &mut RunManifest, c: &MlpConfig) {
    m.set("input_dim", c.input_dim)
        .set("hidden_layers", &c.hidden_layers)
        .set("num_classes", c.num_classes)
        .set("dropout_rate", c.dropout_rate)
        .set("dropout_after_layer", c.dropout_after_layer)
        .set("learning_rate", c.learning_rate)
        .set("batch_size", c.batch_size)
        .set("max_epochs", c.max_epochs)
        .set("stop_loss_threshold", c.stop_loss_threshold)
        .set("patience", c.patience)
        .set("weight_scheme", c.weight_scheme.to_string())
        .set("init_gain", c.init_gain);
}

fn nifti_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            p.is_file() && (name.ends_with(".nii") || name.ends_with(".nii.gz"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn ingest(a: IngestArgs) -> CmdResult {
    let mut man = RunManifest::start("ingest");
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let files = nifti_files(&a.input)?;
    if files.is_empty() {
        return Err(dataset::DatasetError::EmptyInput(format!("no .nii or .nii.gz files in {}", a.input.display())).into());
    }
    let stacks = files.iter().map(read_stack).collect::<Result<Vec<_>, _>>()?;
    let d = assemble(&stacks, &taxonomy, a.standardize)?;
    write_cache(&d, &a.out)?;

    let summary = format!("subjects={}, samples={}, classes={}", d.subjects().len(), d.len(), d.num_classes());
    println!("{summary}");
    man.set("standardize", a.standardize)
        .set("taxonomy", a.taxonomy.as_ref().map_or("bundled".into(), |p| p.display().to_string()))
        .set("feature_dim", d.feature_dim)
        .set("summary", summary)
        .format("rsnd", dataset::CACHE_VERSION)
        .output(&a.out);
    for f in &files {
        man.input(f);
    }
    man.finish(&beside(&a.out))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut man = RunManifest::start("train");
    let d = read_cache(&a.data)?;
    let split = split_by_subject(&d, &split_spec(&a.split, a.seed)?)?;
    let dropout_after = if a.dropout > 0.0 { a.dropout_after.min(a.layers) } else { 0 };
    let config = MlpConfig {
        input_dim: d.feature_dim,
        hidden_layers: vec![a.nodes; a.layers],
        num_classes: d.num_classes(),
        dropout_rate: a.dropout,
        dropout_after_layer: dropout_after,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        stop_loss_threshold: a.threshold,
        patience: a.patience,
        weight_scheme: weight_scheme(&a.weights)?,
        init_gain: a.init_gain,
        seed: a.seed,
    };
    let (model, report) = mlp::train(&config, &split.train, &split.val)?;
    save_model(&model, &a.out)?;
    let csv_path = a.out.with_extension("epochs.csv");
    fs::write(&csv_path, report.to_csv())?;

    let last = report.epochs.last().expect("at least one epoch");
    let val = last.val_accuracy.map_or("none".into(), |v| format!("{v:.4}"));
    println!(
        "epochs={}, stop={}, best_epoch={}, train_loss={:.6}, train_accuracy={:.4}, val_accuracy={}",
        report.epochs_run,
        report.stop_reason.as_str(),
        report.best_epoch,
        last.train_loss,
        last.train_accuracy,
        val
    );
    record_config(&mut man, &config);
    man.seed = Some(a.seed);
    man.set("split", &a.split)
        .set("subjects_train_val_test", [split.train.subjects().len(), split.val.subjects().len(), split.test.subjects().len()])
        .set("epochs_run", report.epochs_run)
        .set("stop_reason", report.stop_reason.as_str())
        .set("best_epoch", report.best_epoch)
        .format("rsnm", MODEL_VERSION)
        .format("rsnd", dataset::CACHE_VERSION)
        .input(&a.data)
        .output(&a.out)
        .output(&csv_path);
    man.finish(&beside(&a.out))?;
    Ok(())
}

fn subset(d: Dataset, spec: &str, seed: u64, which: &str) -> Result<Dataset, Failure> {
    if which == "all" {
        return Ok(d);
    }
    let s = split_by_subject(&d, &split_spec(spec, seed)?)?;
    match which {
        "train" => Ok(s.train),
        "val" => Ok(s.val),
        "test" => Ok(s.test),
        other => Err(Failure::usage(format!("--subset must be test, val, train or all, got {other:?}"))),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut man = RunManifest::start("evaluate");
    let model = load_model(&a.model)?;
    let d = subset(read_cache(&a.data)?, &a.split, a.seed, &a.subset)?;
    let report = score(&model, &d)?;

    let counts = with_suffix(&a.out, "_confusion_counts.csv");
    let heatmap = with_suffix(&a.out, "_confusion.ppm");
    let misclass = with_suffix(&a.out, "_misclassified.tsv");
    let summary_path = with_suffix(&a.out, "_summary.txt");
    fs::write(&counts, report.confusion.counts_csv())?;
    confusion_heatmap(&report.confusion, &heatmap)?;
    fs::write(&misclass, report.misclass_report())?;
    let top3 = report.true_label_in_top().map_or("none".into(), |f| format!("{f:.4}"));
    let summary = format!(
        "accuracy={:.4}, samples={}, misclassified={}, true_label_in_top3={}",
        report.accuracy,
        d.len(),
        report.misclassified.len(),
        top3
    );
    fs::write(&summary_path, format!("{summary}\n"))?;
    println!("{summary}");

    man.seed = Some(a.seed);
    man.set("split", &a.split)
        .set("subset", &a.subset)
        .set("accuracy", report.accuracy)
        .format("rsnm", MODEL_VERSION)
        .input(&a.model)
        .input(&a.data)
        .output(&counts)
        .output(&heatmap)
        .output(heatmap.with_extension("csv"))
        .output(&misclass)
        .output(&summary_path);
    man.finish(&with_suffix(&a.out, ".manifest.json"))?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let mut man = RunManifest::start("predict");
    let model: MlpModel = load_model(&a.model)?;
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    if taxonomy.num_classes() != model.num_classes() {
        return Err(Failure::data(
            "ShapeMismatch",
            format!("model has {} classes, taxonomy has {}", model.num_classes(), taxonomy.num_classes()),
        ));
    }
    let stack = read_stack(&a.input)?;
    let dims = stack.dims().unwrap_or([0; 3]);
    let voxels: usize = dims.iter().product();
    if voxels != model.input_dim() {
        return Err(Failure::data(
            "DimensionMismatch",
            format!(
                "model expects {} voxels per component, input grid {}x{}x{} has {}",
                model.input_dim(),
                dims[0],
                dims[1],
                dims[2],
                voxels
            ),
        ));
    }
    let labels: Vec<String> = taxonomy.classes().to_vec();
    let mut x = Vec::with_capacity(stack.volumes.len() * voxels);
    for v in &stack.volumes {
        let start = x.len();
        x.extend_from_slice(v.voxels());
        if a.standardize {
            standardize_in_place(&mut x[start..]);
        }
    }
    let probs = model.predict_proba_batch(&x, stack.volumes.len(), eval::INFER_CHUNK)?;
    let mut out = String::new();
    for (i, p) in probs.chunks_exact(model.num_classes()).enumerate() {
        let top = topk(p, &labels, a.topk)?;
        let _ = writeln!(out, "{i}\t{}\t{}", top[0].0, format_top(&top));
    }
    print!("{out}");
    fs::write(&a.out, &out)?;
    man.set("topk", a.topk)
        .set("standardize", a.standardize)
        .set("components", stack.volumes.len())
        .format("rsnm", MODEL_VERSION)
        .input(&a.model)
        .input(&a.input)
        .output(&a.out);
    man.finish(&beside(&a.out))?;
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let mut man = RunManifest::start("ablate");
    let d = read_cache(&a.data)?;
    let spec = GridSpec {
        layer_counts: list(&a.layers_list, "layers-list")?,
        node_counts: list(&a.nodes_list, "nodes-list")?,
        k: a.k,
        seed: a.seed,
        max_epochs: a.epochs,
    };
    let base = MlpConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        stop_loss_threshold: Some(a.threshold),
        weight_scheme: weight_scheme(&a.weights)?,
        init_gain: a.init_gain,
        ..MlpConfig::full_size(d.feature_dim, d.num_classes())
    };
    let grid = run_grid(&d, &spec, &base)?;
    let csv = with_suffix(&a.out, ".csv");
    let ppm = with_suffix(&a.out, ".ppm");
    emit_grid(&grid, &csv, &ppm)?;
    print!("{}", grid.to_csv());
    if !grid.flagged_classes.is_empty() {
        eprintln!("flagged classes (< k samples): {}", grid.flagged_classes.join(", "));
    }
    man.seed = Some(a.seed);
    man.set("layer_counts", &spec.layer_counts)
        .set("node_counts", &spec.node_counts)
        .set("k", spec.k)
        .set("max_epochs", spec.max_epochs)
        .set("learning_rate", a.lr)
        .set("batch_size", a.batch_size)
        .set("stop_loss_threshold", a.threshold)
        .set("weight_scheme", &a.weights)
        .set("init_gain", a.init_gain)
        .set("dropout_rate", 0.0)
        .set("flagged_classes", &grid.flagged_classes)
        .input(&a.data)
        .output(&csv)
        .output(&ppm)
        .output(with_suffix(&a.out, "_folds.csv"));
    man.finish(&with_suffix(&a.out, ".manifest.json"))?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut man = RunManifest::start("synth");
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let grid = match list::<usize>(&a.grid, "grid")?.as_slice() {
        &[x, y, z] => [x, y, z],
        _ => return Err(Failure::usage(format!("--grid needs three sizes, got {:?}", a.grid))),
    };
    let spec = SynthSpec {
        grid,
        subjects: a.subjects,
        blob_sigma: a.blob_sigma,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let stacks = synth_generate(&taxonomy, &spec)?;
    fs::create_dir_all(&a.out)?;
    for s in &stacks {
        let path = a.out.join(format!("{}.nii", s.subject_id));
        write_stack(s, &path)?;
        man.output(&path);
    }
    println!(
        "subjects={}, components={}, grid={}x{}x{}",
        stacks.len(),
        taxonomy.num_components(),
        grid[0],
        grid[1],
        grid[2]
    );
    man.seed = Some(a.seed);
    man.set("subjects", a.subjects)
        .set("grid", grid)
        .set("noise_sigma", a.noise)
        .set("blob_sigma", a.blob_sigma)
        .set("taxonomy", a.taxonomy.as_ref().map_or("bundled".into(), |p| p.display().to_string()))
        .format("nifti", "1");
    man.finish(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn project(a: ProjectArgs) -> CmdResult {
    let mut man = RunManifest::start("project");
    let stack = read_stack(&a.input)?;
    let n = stack.volumes.len();
    let vol = stack.volumes.get(a.component).ok_or_else(|| {
        Failure::data("BadComponentIndex", format!("component {} out of range, stack has {n}", a.component))
    })?;
    let img = rgb_composite(vol);
    write_ppm(&img, &a.out)?;
    println!("width={}, height={}", img.width, img.height);
    man.set("component", a.component)
        .set("width", img.width)
        .set("height", img.height)
        .input(&a.input)
        .output(&a.out);
    man.finish(&beside(&a.out))?;
    Ok(())
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let mut man = RunManifest::start("bench");
    let model = match (&a.model, &a.shape) {
        (Some(p), _) => {
            man.input(p);
            load_model(p)?
        }
        (None, Some(s)) => {
            let widths: Vec<usize> = list(s, "shape")?;
            if widths.len() < 2 {
                return Err(Failure::usage("--shape needs at least input and output widths"));
            }
            let config = MlpConfig {
                hidden_layers: widths[1..widths.len() - 1].to_vec(),
                dropout_rate: 0.0,
                dropout_after_layer: 0,
                seed: a.seed,
                ..MlpConfig::full_size(widths[0], widths[widths.len() - 1])
            };
            MlpModel::init(&config)?
        }
        (None, None) => return Err(Failure::usage("one of --model or --shape is required")),
    };
    if a.n == 0 {
        return Err(Failure::usage("--n must be >= 1"));
    }
    let r = eval::throughput_bench(&model, a.n, a.seed);
    println!("{r}");
    fs::write(&a.out, format!("{r}\n"))?;
    man.seed = Some(a.seed);
    man.set("shape", &r.shape)
        .set("samples", r.samples)
        .set("seconds", r.seconds)
        .set("throughput", r.throughput)
        .output(&a.out);
    man.finish(&beside(&a.out))?;
    Ok(())
}
