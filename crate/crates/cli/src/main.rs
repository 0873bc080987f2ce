//! Command line front end: every subcommand is a thin shell over library
//! operations, driven by one shared configuration.
//!
//! Configuration comes from an optional JSON file with flat dotted keys
//! (`"augment.noise_sigma": 0.02`) merged over built-in defaults, with
//! command line flags overriding file values. All randomness flows from the
//! single `seed` value. The process exits 0 exactly when no error occurred.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use voxscene::augment::AugmentConfig;
use voxscene::cloud::remap_labels;
use voxscene::eval::{format_report, metrics, report_csv, ConfusionMatrix};
use voxscene::nn::{load_checkpoint, ArchKind};
use voxscene::ply::DEFAULT_LABEL_PROPERTY;
use voxscene::spatial::{covered_area, grid_subsample, DEFAULT_COVERAGE_PIXEL};
use voxscene::train::AdamConfig;
use voxscene::{
    classify_cloud, load_ply, save_ply, train, ClassifyConfig, Label, LabelMapping, Model,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "voxscene", version, about = "Multi-scale voxel CNN point cloud classification")]
struct Cli {
    /// JSON config file with flat dotted keys; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random decision of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 uses one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Subsampling cell in meters (prepare, classify).
    #[arg(long, global = true)]
    cell: Option<f64>,

    /// Training samples drawn per class and epoch.
    #[arg(long, global = true)]
    n_per_class: Option<usize>,

    /// Comma-separated voxel sizes in meters, finest first.
    #[arg(long, global = true, value_delimiter = ',')]
    scales: Option<Vec<f64>>,

    /// Occupancy grid resolution per axis.
    #[arg(long, global = true)]
    grid_n: Option<usize>,

    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Samples per training batch.
    #[arg(long, global = true)]
    batch_size: Option<usize>,

    /// Directory receiving checkpoints and the history CSV.
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Subsample labeled clouds and optionally remap their labels.
    Prepare {
        /// Input PLY files with a `class` vertex property.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Label mapping JSON: source id to target id or "drop".
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Directory receiving the processed clouds.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints and a history CSV.
    Train {
        /// Training clouds; defaults to the config's `inputs` list.
        inputs: Vec<PathBuf>,
        /// Continue from the last checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Label every point of a cloud with a trained model.
    Classify {
        /// Checkpoint directory (holds metadata.json and tensor blobs).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input PLY; any label property is ignored.
        input: PathBuf,
        /// Output PLY with predicted labels.
        output: PathBuf,
    },
    /// Compare predicted labels against ground truth.
    Evaluate {
        /// Predictions PLY with a `class` property.
        predictions: PathBuf,
        /// Ground truth PLY with a `class` property.
        ground_truth: PathBuf,
    },
    /// Print the covered XY area of a cloud.
    Area {
        input: PathBuf,
    },
}

/// The one configuration shared by all subcommands; the experiment record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    arch: ArchKind,
    reduced: bool,
    grid_n: usize,
    scales: Vec<f64>,
    n_per_class: usize,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    workers: usize,
    dropout: Option<f64>,
    checkpoint_dir: Option<PathBuf>,
    augment: AugmentConfig,
    optimizer: AdamConfig,
    /// Subsampling cell for prepare and classify, meters.
    cell: f64,
    /// Pixel side for covered-area statistics, meters.
    pixel: f64,
    /// Training inputs; positional arguments take precedence.
    inputs: Vec<PathBuf>,
    /// Label mapping applied by prepare.
    mapping: Option<PathBuf>,
    /// Output directory of prepare.
    out_dir: PathBuf,
    /// Checkpoint directory read by classify.
    checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            arch: t.arch,
            reduced: t.reduced,
            grid_n: t.grid_n,
            scales: t.scales,
            n_per_class: t.n_per_class,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            workers: t.workers,
            dropout: t.dropout,
            checkpoint_dir: t.checkpoint_dir,
            augment: t.augment,
            optimizer: t.optimizer,
            cell: 0.02,
            pixel: DEFAULT_COVERAGE_PIXEL,
            inputs: Vec::new(),
            mapping: None,
            out_dir: PathBuf::from("prepared"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    fn train_config(&self, resume: bool) -> TrainConfig {
        TrainConfig {
            arch: self.arch,
            reduced: self.reduced,
            grid_n: self.grid_n,
            scales: self.scales.clone(),
            n_per_class: self.n_per_class,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            workers: self.workers,
            dropout: self.dropout,
            checkpoint_dir: self.checkpoint_dir.clone(),
            resume,
            augment: self.augment.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn classify_config(&self) -> ClassifyConfig {
        ClassifyConfig {
            cell: self.cell,
            batch_size: self.batch_size,
            workers: self.workers,
        }
    }

    fn apply_flags(&mut self, cli: &Cli) {
        if let Some(v) = cli.seed {
            self.seed = v;
        }
        if let Some(v) = cli.workers {
            self.workers = v;
        }
        if let Some(v) = cli.cell {
            self.cell = v;
        }
        if let Some(v) = cli.n_per_class {
            self.n_per_class = v;
        }
        if let Some(v) = &cli.scales {
            self.scales = v.clone();
        }
        if let Some(v) = cli.grid_n {
            self.grid_n = v;
        }
        if let Some(v) = cli.epochs {
            self.epochs = v;
        }
        if let Some(v) = cli.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = &cli.checkpoint_dir {
            self.checkpoint_dir = Some(v.clone());
        }
    }
}

/// Expands top-level dotted keys into nested objects: `{"a.b": 1}` becomes
/// `{"a": {"b": 1}}`, merging with any nested form already present.
fn expand_dotted(raw: Value) -> Result<Value> {
    let Value::Object(flat) = raw else {
        bail!("config root must be a JSON object");
    };
    let mut root = Value::Object(serde_json::Map::new());
    for (key, value) in flat {
        let mut slot = &mut root;
        for part in key.split('.') {
            let Value::Object(map) = slot else {
                bail!("config key {key:?} descends into a non-object value");
            };
            slot = map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()));
        }
        merge_value(slot, value, &key)?;
    }
    Ok(root)
}

fn merge_value(slot: &mut Value, incoming: Value, key: &str) -> Result<()> {
    match (&mut *slot, incoming) {
        (Value::Object(dst), Value::Object(src)) => {
            for (k, v) in src {
                let child = dst
                    .entry(k)
                    .or_insert_with(|| Value::Object(serde_json::Map::new()));
                merge_value(child, v, key)?;
            }
            Ok(())
        }
        (Value::Object(dst), v) if dst.is_empty() => {
            *slot = v;
            Ok(())
        }
        _ => bail!("config key {key:?} conflicts with another value"),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    let nested = expand_dotted(raw)?;
    serde_json::from_value(nested)
        .with_context(|| format!("invalid config {}", path.display()))
}

fn load_labeled(path: &Path) -> Result<voxscene::LabeledCloud> {
    load_ply(path, Some(DEFAULT_LABEL_PROPERTY))
        .with_context(|| format!("loading labeled cloud {}", path.display()))
}

fn cmd_prepare(
    config: &RunConfig,
    inputs: &[PathBuf],
    mapping: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let mapping = match mapping.or(config.mapping.as_deref()) {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read mapping {}", path.display()))?;
            Some(LabelMapping::from_json(&text)?)
        }
        None => None,
    };
    let out_dir = out_dir.unwrap_or(&config.out_dir);
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    for input in inputs {
        let cloud = load_labeled(input)?;
        let before = cloud.len();
        let cloud = match &mapping {
            Some(m) => remap_labels(&cloud, m)?,
            None => cloud,
        };
        let sub = grid_subsample(&cloud, config.cell)?;
        let area = covered_area(&sub.cloud, config.pixel)?;
        let name = input
            .file_name()
            .with_context(|| format!("input {} has no file name", input.display()))?;
        let out_path = out_dir.join(name);
        save_ply(&sub.cloud, &out_path, true)?;
        println!(
            "{}: points_before={before} points_after={} -> {}",
            input.display(),
            sub.cloud.len(),
            out_path.display()
        );
        println!("area_m2={area:.2}");
    }
    Ok(())
}

fn cmd_train(config: &RunConfig, inputs: &[PathBuf], resume: bool) -> Result<()> {
    let paths: Vec<PathBuf> = if inputs.is_empty() {
        config.inputs.clone()
    } else {
        inputs.to_vec()
    };
    if paths.is_empty() {
        bail!("no training clouds: pass PLY files or set \"inputs\" in the config");
    }
    if config.checkpoint_dir.is_none() {
        bail!("training requires --checkpoint-dir or \"checkpoint_dir\" in the config");
    }
    let clouds = paths
        .iter()
        .map(|p| load_labeled(p))
        .collect::<Result<Vec<_>>>()?;
    let out = train(&clouds, &config.train_config(resume))?;
    if let Some(last) = out.stats.last() {
        println!(
            "epoch={} mean_loss={} balanced_accuracy={}",
            last.epoch, last.mean_loss, last.balanced_accuracy
        );
    }
    Ok(())
}

fn cmd_classify(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let checkpoint = checkpoint
        .or(config.checkpoint.as_deref())
        .context("classify needs --checkpoint or \"checkpoint\" in the config")?;
    let (meta, store) = load_checkpoint(checkpoint)?;
    let mut model = Model::<f32>::build(&meta.spec, 0)?;
    model.import(&store)?;

    let cloud = load_ply(input, None)
        .with_context(|| format!("loading cloud {}", input.display()))?;
    let labels = classify_cloud(&model, &cloud, &config.classify_config())?;
    let table: BTreeMap<Label, String> = (0..meta.spec.classes)
        .map(|c| (c as Label, format!("class_{c}")))
        .collect();
    let labeled = cloud.relabeled(labels, table)?;
    save_ply(&labeled, output, true)?;
    println!("{}: {} points labeled", output.display(), labeled.len());
    Ok(())
}

fn cmd_evaluate(predictions: &Path, ground_truth: &Path) -> Result<()> {
    let pred = load_labeled(predictions)?;
    let truth = load_labeled(ground_truth)?;
    let classes = pred.num_classes().max(truth.num_classes());
    let cm = ConfusionMatrix::from_labels(
        truth.labels().expect("labels required on load"),
        pred.labels().expect("labels required on load"),
        classes,
    )?;
    let report = metrics(&cm);
    let names: Vec<String> = (0..classes)
        .map(|c| {
            truth
                .class_table()
                .get(&(c as Label))
                .cloned()
                .unwrap_or_else(|| format!("class_{c}"))
        })
        .collect();
    print!("{}", format_report(&report, &names));
    println!();
    print!("{}", report_csv(&report, &names));
    Ok(())
}

fn cmd_area(config: &RunConfig, input: &Path) -> Result<()> {
    let cloud = load_ply(input, None)
        .with_context(|| format!("loading cloud {}", input.display()))?;
    let area = covered_area(&cloud, config.pixel)?;
    println!("area_m2={area:.2}");
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut config = load_config(cli.config.as_deref())?;
    config.apply_flags(&cli);

    match &cli.command {
        Command::Prepare {
            inputs,
            mapping,
            out_dir,
        } => cmd_prepare(&config, inputs, mapping.as_deref(), out_dir.as_deref()),
        Command::Train { inputs, resume } => cmd_train(&config, inputs, *resume),
        Command::Classify {
            checkpoint,
            input,
            output,
        } => cmd_classify(&config, checkpoint.as_deref(), input, output),
        Command::Evaluate {
            predictions,
            ground_truth,
        } => cmd_evaluate(predictions, ground_truth),
        Command::Area { input } => cmd_area(&config, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
