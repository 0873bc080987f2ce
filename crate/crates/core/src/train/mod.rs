//! Training loop: balanced sampling, neighborhood extraction, augmentation,
//! forward/backward, Adam updates, checkpointing.
//!
//! Every random decision derives from the configured seed through
//! independent counter-based generator streams — the epoch plan, each
//! sample's augmentation, each batch's dropout mask — and all parallel
//! reductions run in a fixed order, so a run is reproducible bit for bit
//! regardless of the worker count, and an interrupted run resumed from its
//! last checkpoint rejoins the uninterrupted trajectory exactly.

mod adam;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use loss::softmax_cross_entropy;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::model::{ArchKind, BatchInput, Model, ModelSpec};
use crate::sampler::{build_class_index, epoch_seed, plan_epoch};
use crate::spatial::SpatialIndex;
use crate::voxel::{validate_scales, GridSpec, MultiScaleSample, OccupancyGrid};

/// Stream offset of the per-batch dropout generators; sample augmentation
/// uses streams `1..=len(plan)` of the same epoch seed and the plan itself
/// uses stream 0.
const DROPOUT_STREAM_BASE: u64 = 1 << 63;

fn default_grid_n() -> usize {
    32
}
fn default_scales() -> Vec<f64> {
    vec![0.05, 0.10, 0.15]
}
fn default_n_per_class() -> usize {
    1000
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchKind,
    /// Use the small test-size variant of the multi-scale network.
    pub reduced: bool,
    pub grid_n: usize,
    /// Voxel sizes in meters, one network branch per scale.
    pub scales: Vec<f64>,
    /// Training points drawn per class and epoch.
    pub n_per_class: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; 0 uses one per available CPU.
    pub workers: usize,
    pub dropout: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from `<checkpoint_dir>/last` if it exists.
    pub resume: bool,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::MsDvs,
            reduced: false,
            grid_n: default_grid_n(),
            scales: default_scales(),
            n_per_class: default_n_per_class(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            workers: 0,
            dropout: None,
            checkpoint_dir: None,
            resume: false,
            augment: AugmentConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_scales(&self.scales)?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        for (name, value) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_per_class", self.n_per_class),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.resume && self.checkpoint_dir.is_none() {
            return Err(Error::Config(
                "resume requires a checkpoint directory".into(),
            ));
        }
        Ok(())
    }

    /// The network this configuration describes, for `classes` classes.
    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        let mut spec = match (self.arch, self.reduced) {
            (ArchKind::MsDvs, false) => ModelSpec::ms_dvs(&self.scales, classes),
            (ArchKind::MsDvs, true) => ModelSpec::ms_dvs_reduced(&self.scales, classes),
            (ArchKind::VoxNet, _) => {
                ModelSpec::voxnet(self.scales.first().copied().unwrap_or(0.1), classes)
            }
        };
        spec.grid_n = self.grid_n;
        spec.dropout = self.dropout;
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub balanced_accuracy: f64,
}

pub struct TrainOutput {
    pub model: Model<f32>,
    pub stats: Vec<EpochStats>,
    pub step: u64,
}

/// Builds one training sample: gather the neighborhood of the planned
/// point, augment it, voxelize at every scale.
fn build_sample(
    cloud: &LabeledCloud,
    index: &SpatialIndex,
    center: [f64; 3],
    class: u32,
    specs: &[GridSpec],
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> MultiScaleSample<f32> {
    let half_max = specs.last().expect("at least one scale").half_extent();
    // With augmentation on, rotation, scaling and jitter can move points
    // into the cube from outside it; gather with enough margin to cover
    // every point the transform could bring inside.
    let gather = if aug.enabled {
        2.0 * half_max + 10.0 * aug.noise_sigma
    } else {
        half_max
    };
    let mut relative: Vec<[f64; 3]> = index
        .box_query(center, gather)
        .into_iter()
        .map(|id| {
            let p = cloud.points()[id];
            [p[0] - center[0], p[1] - center[1], p[2] - center[2]]
        })
        .collect();
    relative = augment(&relative, aug, half_max, rng);
    let grids = specs
        .iter()
        .map(|&spec| OccupancyGrid::from_relative_points(&relative, spec))
        .collect();
    MultiScaleSample {
        grids,
        center,
        label: Some(class),
    }
}

fn first_argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Swaps `tmp` into place at `dst`, replacing whatever was there.
fn replace_dir(tmp: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        fs::remove_dir_all(dst)?;
    }
    fs::rename(tmp, dst)?;
    Ok(())
}

fn write_history(dir: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss,balanced_accuracy\n");
    for s in stats {
        text.push_str(&format!("{},{},{}\n", s.epoch, s.mean_loss, s.balanced_accuracy));
    }
    let tmp = dir.join(".history.csv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, dir.join("history.csv"))?;
    Ok(())
}

fn read_history(dir: &Path, before_epoch: usize) -> Vec<EpochStats> {
    let Ok(text) = fs::read_to_string(dir.join("history.csv")) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut parts = line.split(',');
            let epoch = parts.next()?.parse().ok()?;
            let mean_loss = parts.next()?.parse().ok()?;
            let balanced_accuracy = parts.next()?.parse().ok()?;
            Some(EpochStats {
                epoch,
                mean_loss,
                balanced_accuracy,
            })
        })
        .filter(|s| s.epoch < before_epoch)
        .collect()
}

/// Trains a classifier on labeled clouds according to `config`.
pub fn train(clouds: &[LabeledCloud], config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let class_index = build_class_index(clouds)?;
    let classes = clouds
        .iter()
        .map(|c| c.num_classes())
        .max()
        .ok_or(Error::EmptyCloud)?;
    let spec = config.model_spec(classes);
    let specs: Vec<GridSpec> = config
        .scales
        .iter()
        .map(|&d| GridSpec::new(spec.grid_n, d))
        .collect::<Result<_>>()?;

    let mut model = Model::<f32>::build(&spec, config.seed)?;
    let mut optimizer = Adam::new(config.optimizer.clone());
    let mut start_epoch = 0usize;
    let mut step = 0u64;
    let mut stats: Vec<EpochStats> = Vec::new();

    if config.resume {
        let dir = config.checkpoint_dir.as_ref().expect("validated").join("last");
        if dir.join("metadata.json").exists() {
            let (meta, store) = load_checkpoint(&dir)?;
            if meta.spec != spec {
                return Err(Error::Checkpoint(format!(
                    "checkpoint architecture {:?} does not match the configured {:?}",
                    meta.spec, spec
                )));
            }
            model.import(&store)?;
            optimizer.load_state(&store, meta.step);
            step = meta.step;
            start_epoch = meta.epoch;
            stats = read_history(config.checkpoint_dir.as_ref().expect("validated"), start_epoch);
            log::info!("resumed at epoch {start_epoch}, step {step}");
        }
    }

    let run = |model: &mut Model<f32>, optimizer: &mut Adam, step: &mut u64,
               stats: &mut Vec<EpochStats>| -> Result<()> {
        let indexes: Vec<SpatialIndex> = clouds
            .par_iter()
            .map(SpatialIndex::build)
            .collect::<Result<_>>()?;
        for epoch in start_epoch..config.epochs {
            let eseed = epoch_seed(config.seed, epoch);
            let plan = plan_epoch(&class_index, config.n_per_class, eseed)?;
            let mut loss_sum = 0f64;
            let mut correct = vec![0usize; spec.classes];
            let mut totals = vec![0usize; spec.classes];

            for (batch_no, chunk) in plan.entries.chunks(config.batch_size).enumerate() {
                let base = batch_no * config.batch_size;
                let samples: Vec<MultiScaleSample<f32>> = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(offset, entry)| {
                        let j = base + offset;
                        let mut rng = ChaCha8Rng::seed_from_u64(eseed);
                        rng.set_stream(j as u64 + 1);
                        build_sample(
                            &clouds[entry.cloud],
                            &indexes[entry.cloud],
                            clouds[entry.cloud].points()[entry.point],
                            entry.class,
                            &specs,
                            &config.augment,
                            &mut rng,
                        )
                    })
                    .collect();
                let batch = BatchInput::from_samples(&samples, &spec)?;
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(eseed);
                dropout_rng.set_stream(DROPOUT_STREAM_BASE + batch_no as u64);
                let (logits, cache) = model.forward_train(&batch, true, &mut dropout_rng)?;
                let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        sample_ids: (base..base + chunk.len()).collect(),
                    });
                }
                model.zero_grads();
                model.backward(&cache, &dlogits);
                optimizer.step(model);
                *step += 1;

                loss_sum += loss * chunk.len() as f64;
                let c = spec.classes;
                for (bi, &label) in batch.labels.iter().enumerate() {
                    let row = &logits.data()[bi * c..(bi + 1) * c];
                    totals[label as usize] += 1;
                    if first_argmax(row) == label as usize {
                        correct[label as usize] += 1;
                    }
                }
            }

            let mean_loss = loss_sum / plan.entries.len() as f64;
            let mut acc_sum = 0f64;
            let mut acc_classes = 0usize;
            for (c, t) in correct.iter().zip(&totals) {
                if *t > 0 {
                    acc_sum += *c as f64 / *t as f64;
                    acc_classes += 1;
                }
            }
            let balanced_accuracy = acc_sum / acc_classes.max(1) as f64;
            stats.push(EpochStats {
                epoch,
                mean_loss,
                balanced_accuracy,
            });
            log::info!(
                "epoch {epoch}: loss {mean_loss:.4}, balanced accuracy {balanced_accuracy:.4}"
            );

            if let Some(dir) = &config.checkpoint_dir {
                fs::create_dir_all(dir)?;
                let mut store = model.export();
                optimizer.state_into(&mut store);
                let tmp = dir.join(".last.tmp");
                if tmp.exists() {
                    fs::remove_dir_all(&tmp)?;
                }
                save_checkpoint(&tmp, &spec, *step, epoch + 1, &store)?;
                replace_dir(&tmp, &dir.join("last"))?;
                write_history(dir, stats)?;
            }
        }
        Ok(())
    };

    if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| run(&mut model, &mut optimizer, &mut step, &mut stats))?;
    } else {
        run(&mut model, &mut optimizer, &mut step, &mut stats)?;
    }

    Ok(TrainOutput { model, stats, step })
}
