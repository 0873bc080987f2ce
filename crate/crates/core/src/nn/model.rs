//! Network architectures assembled from the layer primitives.
//!
//! Two families are provided. The multi-scale network runs one convolutional
//! branch per voxel scale — two conv/batch-norm/PReLU/squeeze-excitation
//! blocks, a pooling step, two more blocks, another pooling step, and a fully
//! connected block — then concatenates the branch descriptors and maps them
//! to class logits. The single-scale baseline is a small two-conv network
//! with leaky ReLU activations. Parameters are created in one fixed order
//! from a seeded generator, so a `(spec, seed)` pair always yields the same
//! network.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::checkpoint::ParameterStore;
use crate::nn::layers::{
    softmax_rows, BatchNorm, BatchNormCache, Conv3d, Conv3dCache, Dropout, DropoutCache,
    LeakyRelu, LeakyReluCache, Linear, LinearCache, MaxPool3d, MaxPoolCache, PRelu, PReluCache,
    Param, SeCache, SqueezeExcite, SE_RATIO,
};
use crate::nn::tensor::Tensor;
use crate::nn::Scalar;
use crate::voxel::{validate_scales, MultiScaleSample};
use crate::Label;

pub const VOXNET_LEAKY_SLOPE: f64 = 0.1;

/// Architecture family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "ms_dvs")]
    MsDvs,
    #[serde(rename = "voxnet")]
    VoxNet,
}

/// Complete structural description of a network. Together with a seed this
/// determines every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ArchKind,
    /// Grid resolution per axis; every scale uses the same resolution.
    pub grid_n: usize,
    /// Voxel edge lengths in meters, strictly increasing; one branch each.
    pub deltas: Vec<f64>,
    /// Output channels of the four convolutions of a branch (the baseline
    /// uses the first two).
    pub conv_channels: Vec<usize>,
    /// Zero padding of the branch convolutions (multi-scale network only).
    pub conv_padding: usize,
    /// Width of the per-branch descriptor (or of the baseline's hidden
    /// fully connected layer).
    pub branch_width: usize,
    pub classes: usize,
    /// Dropout probability before the classifier, if any.
    pub dropout: Option<f64>,
    /// Squeeze-excitation bottleneck ratio.
    pub se_ratio: usize,
}

impl ModelSpec {
    /// The standard multi-scale configuration: 32-voxel grids, channel
    /// widths 32/32/64/64, unpadded convolutions, 1024-wide descriptors.
    pub fn ms_dvs(deltas: &[f64], classes: usize) -> Self {
        Self {
            kind: ArchKind::MsDvs,
            grid_n: 32,
            deltas: deltas.to_vec(),
            conv_channels: vec![32, 32, 64, 64],
            conv_padding: 0,
            branch_width: 1024,
            classes,
            dropout: None,
            se_ratio: SE_RATIO,
        }
    }

    /// A small variant of the multi-scale network for tests and gradient
    /// checks: 8-voxel grids, channels 4/4/8/8, 32-wide descriptors. The
    /// convolutions pad by one so the 8-voxel grid survives all four.
    pub fn ms_dvs_reduced(deltas: &[f64], classes: usize) -> Self {
        Self {
            kind: ArchKind::MsDvs,
            grid_n: 8,
            deltas: deltas.to_vec(),
            conv_channels: vec![4, 4, 8, 8],
            conv_padding: 1,
            branch_width: 32,
            classes,
            dropout: None,
            se_ratio: SE_RATIO,
        }
    }

    /// The single-scale baseline: conv 32@5 stride 2, conv 32@3, pool,
    /// then a 128-wide fully connected layer.
    pub fn voxnet(delta: f64, classes: usize) -> Self {
        Self {
            kind: ArchKind::VoxNet,
            grid_n: 32,
            deltas: vec![delta],
            conv_channels: vec![32, 32],
            conv_padding: 0,
            branch_width: 128,
            classes,
            dropout: None,
            se_ratio: SE_RATIO,
        }
    }

    pub fn k(&self) -> usize {
        self.deltas.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_scales(&self.deltas)?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "at least 2 classes required, got {}",
                self.classes
            )));
        }
        if self.se_ratio == 0 {
            return Err(Error::Config("se_ratio must be positive".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "dropout probability must lie in [0, 1), got {p}"
                )));
            }
        }
        let needed = match self.kind {
            ArchKind::MsDvs => 4,
            ArchKind::VoxNet => 2,
        };
        if self.conv_channels.len() != needed || self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "expected {needed} positive conv channel counts, got {:?}",
                self.conv_channels
            )));
        }
        if self.branch_width == 0 {
            return Err(Error::Config("branch_width must be positive".into()));
        }
        if self.kind == ArchKind::VoxNet && self.k() != 1 {
            return Err(Error::Config(format!(
                "the baseline is single scale, got {} scales",
                self.k()
            )));
        }
        // The trace errors out if the grid shrinks to nothing on the way.
        self.branch_trace()?;
        Ok(())
    }

    /// Spatial size after each stage of one branch, starting at the input
    /// resolution.
    pub fn branch_trace(&self) -> Result<Vec<usize>> {
        let mut trace = vec![self.grid_n];
        let mut cur = self.grid_n as isize;
        let mut step = |k: isize, stride: isize, pad: isize| -> Result<isize> {
            let next = (cur + 2 * pad - k) / stride + 1;
            if cur + 2 * pad < k || next <= 0 {
                return Err(Error::Config(format!(
                    "grid resolution {} exhausted inside the network (size {cur} before a \
                     kernel-{k} stage)",
                    self.grid_n
                )));
            }
            cur = next;
            Ok(next)
        };
        match self.kind {
            ArchKind::MsDvs => {
                let p = self.conv_padding as isize;
                for stage in [(3, 1, p), (3, 1, p), (2, 2, 0), (3, 1, p), (3, 1, p), (2, 2, 0)] {
                    trace.push(step(stage.0, stage.1, stage.2)? as usize);
                }
            }
            ArchKind::VoxNet => {
                for stage in [(5, 2, 0), (3, 1, 0), (2, 2, 0)] {
                    trace.push(step(stage.0, stage.1, stage.2)? as usize);
                }
            }
        }
        Ok(trace)
    }

    /// Flattened feature count entering a branch's fully connected layer.
    pub fn flatten_width(&self) -> Result<usize> {
        let trace = self.branch_trace()?;
        let side = *trace.last().expect("trace is never empty");
        let channels = *self.conv_channels.last().expect("validated non-empty");
        Ok(channels * side * side * side)
    }

    /// Width of the concatenated descriptor entering the classifier.
    pub fn concat_width(&self) -> Result<usize> {
        Ok(match self.kind {
            ArchKind::MsDvs => self.k() * self.branch_width,
            ArchKind::VoxNet => self.branch_width,
        })
    }
}

// ---------------------------------------------------------------------------
// Batched input
// ---------------------------------------------------------------------------

/// A batch of multi-scale samples, one `[B, 1, n, n, n]` tensor per scale.
#[derive(Debug, Clone)]
pub struct BatchInput<T> {
    pub grids: Vec<Tensor<T>>,
    pub labels: Vec<Label>,
}

impl<T: Scalar> BatchInput<T> {
    /// Stacks samples into per-scale tensors, validating scale count and
    /// grid size against [`ModelSpec`]. Labels are collected when every
    /// sample carries one.
    pub fn from_samples(samples: &[MultiScaleSample<T>], spec: &ModelSpec) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let b = samples.len();
        let n = spec.grid_n;
        let vol = n * n * n;
        let mut grids = Vec::with_capacity(spec.k());
        for (si, &delta) in spec.deltas.iter().enumerate() {
            let mut tensor = Tensor::zeros(&[b, 1, n, n, n]);
            for (bi, sample) in samples.iter().enumerate() {
                let grid = sample.grids.get(si).ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "sample {bi} has {} scales, expected {}",
                        sample.grids.len(),
                        spec.k()
                    ))
                })?;
                if grid.spec().n() != n || grid.spec().delta() != delta {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {bi} scale {si}: grid {}@{} does not match spec {n}@{delta}",
                        grid.spec().n(),
                        grid.spec().delta()
                    )));
                }
                tensor.data_mut()[bi * vol..(bi + 1) * vol].copy_from_slice(grid.values());
            }
            grids.push(tensor);
        }
        let labels: Vec<Label> = samples.iter().filter_map(|s| s.label).collect();
        if !labels.is_empty() && labels.len() != b {
            return Err(Error::ShapeMismatch(
                "batch mixes labeled and unlabeled samples".into(),
            ));
        }
        Ok(Self { grids, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.grids[0].shape()[0]
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv3d<T>,
    bn: BatchNorm<T>,
    act: PRelu<T>,
    se: SqueezeExcite<T>,
}

struct ConvBlockCache<T> {
    conv: Conv3dCache<T>,
    bn: BatchNormCache<T>,
    act: PReluCache<T>,
    se: SeCache<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(
        prefix: &str,
        in_c: usize,
        out_c: usize,
        pad: usize,
        se_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv3d::new(&format!("{prefix}.conv"), in_c, out_c, 3, 1, pad, rng),
            bn: BatchNorm::new(&format!("{prefix}.bn"), out_c),
            act: PRelu::new(&format!("{prefix}.act"), out_c),
            se: SqueezeExcite::new(&format!("{prefix}.se"), out_c, se_ratio, rng),
        }
    }

    fn forward_train(
        &mut self,
        x: &Tensor<T>,
        batch_stats: bool,
    ) -> (Tensor<T>, ConvBlockCache<T>) {
        let (y, conv) = self.conv.forward(x);
        let (y, bn) = self.bn.forward_train(&y, batch_stats);
        let (y, act) = self.act.forward(&y);
        let (y, se) = self.se.forward(&y);
        (y, ConvBlockCache { conv, bn, act, se })
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (y, _) = self.conv.forward(x);
        let y = self.bn.forward_eval(&y);
        let (y, _) = self.act.forward(&y);
        let (y, _) = self.se.forward(&y);
        y
    }

    fn backward(&mut self, cache: &ConvBlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dy = self.se.backward(&cache.se, dy);
        let dy = self.act.backward(&cache.act, &dy);
        let dy = self.bn.backward(&cache.bn, &dy);
        self.conv.backward(&cache.conv, &dy)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
        self.act.visit(f);
        self.se.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
        self.act.visit_mut(f);
        self.se.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
struct DvsBranch<T> {
    block1: ConvBlock<T>,
    block2: ConvBlock<T>,
    pool1: MaxPool3d,
    block3: ConvBlock<T>,
    block4: ConvBlock<T>,
    pool2: MaxPool3d,
    fc: Linear<T>,
    fc_bn: BatchNorm<T>,
    fc_act: PRelu<T>,
    fc_se: SqueezeExcite<T>,
}

struct DvsBranchCache<T> {
    b1: ConvBlockCache<T>,
    b2: ConvBlockCache<T>,
    p1: MaxPoolCache,
    b3: ConvBlockCache<T>,
    b4: ConvBlockCache<T>,
    p2: MaxPoolCache,
    flat_shape: Vec<usize>,
    fc: LinearCache<T>,
    fc_bn: BatchNormCache<T>,
    fc_act: PReluCache<T>,
    fc_se: SeCache<T>,
}

impl<T: Scalar> DvsBranch<T> {
    fn new(prefix: &str, spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let c = &spec.conv_channels;
        let pad = spec.conv_padding;
        let flat = spec.flatten_width()?;
        Ok(Self {
            block1: ConvBlock::new(&format!("{prefix}.block1"), 1, c[0], pad, spec.se_ratio, rng),
            block2: ConvBlock::new(
                &format!("{prefix}.block2"),
                c[0],
                c[1],
                pad,
                spec.se_ratio,
                rng,
            ),
            pool1: MaxPool3d::new(2),
            block3: ConvBlock::new(
                &format!("{prefix}.block3"),
                c[1],
                c[2],
                pad,
                spec.se_ratio,
                rng,
            ),
            block4: ConvBlock::new(
                &format!("{prefix}.block4"),
                c[2],
                c[3],
                pad,
                spec.se_ratio,
                rng,
            ),
            pool2: MaxPool3d::new(2),
            fc: Linear::new(&format!("{prefix}.fc"), flat, spec.branch_width, rng),
            fc_bn: BatchNorm::new(&format!("{prefix}.fc_bn"), spec.branch_width),
            fc_act: PRelu::new(&format!("{prefix}.fc_act"), spec.branch_width),
            fc_se: SqueezeExcite::new(
                &format!("{prefix}.fc_se"),
                spec.branch_width,
                spec.se_ratio,
                rng,
            ),
        })
    }

    fn forward_train(
        &mut self,
        x: &Tensor<T>,
        batch_stats: bool,
    ) -> (Tensor<T>, DvsBranchCache<T>) {
        let (y, b1) = self.block1.forward_train(x, batch_stats);
        let (y, b2) = self.block2.forward_train(&y, batch_stats);
        let (y, p1) = self.pool1.forward(&y);
        let (y, b3) = self.block3.forward_train(&y, batch_stats);
        let (y, b4) = self.block4.forward_train(&y, batch_stats);
        let (y, p2) = self.pool2.forward(&y);
        let flat_shape = y.shape().to_vec();
        let b = flat_shape[0];
        let y = y.reshaped(&[b, y.len() / b]).expect("flatten preserves volume");
        let (y, fc) = self.fc.forward(&y);
        let (y, fc_bn) = self.fc_bn.forward_train(&y, batch_stats);
        let (y, fc_act) = self.fc_act.forward(&y);
        let (y, fc_se) = self.fc_se.forward(&y);
        (
            y,
            DvsBranchCache {
                b1,
                b2,
                p1,
                b3,
                b4,
                p2,
                flat_shape,
                fc,
                fc_bn,
                fc_act,
                fc_se,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.block1.forward_eval(x);
        let y = self.block2.forward_eval(&y);
        let (y, _) = self.pool1.forward(&y);
        let y = self.block3.forward_eval(&y);
        let y = self.block4.forward_eval(&y);
        let (y, _) = self.pool2.forward(&y);
        let b = y.shape()[0];
        let y = y.reshaped(&[b, y.len() / b]).expect("flatten preserves volume");
        let (y, _) = self.fc.forward(&y);
        let y = self.fc_bn.forward_eval(&y);
        let (y, _) = self.fc_act.forward(&y);
        let (y, _) = self.fc_se.forward(&y);
        y
    }

    fn backward(&mut self, cache: &DvsBranchCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dy = self.fc_se.backward(&cache.fc_se, dy);
        let dy = self.fc_act.backward(&cache.fc_act, &dy);
        let dy = self.fc_bn.backward(&cache.fc_bn, &dy);
        let dy = self.fc.backward(&cache.fc, &dy);
        let dy = dy
            .reshaped(&cache.flat_shape)
            .expect("unflatten preserves volume");
        let dy = self.pool2.backward(&cache.p2, &dy);
        let dy = self.block4.backward(&cache.b4, &dy);
        let dy = self.block3.backward(&cache.b3, &dy);
        let dy = self.pool1.backward(&cache.p1, &dy);
        let dy = self.block2.backward(&cache.b2, &dy);
        self.block1.backward(&cache.b1, &dy)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.block1.visit(f);
        self.block2.visit(f);
        self.block3.visit(f);
        self.block4.visit(f);
        self.fc.visit(f);
        self.fc_bn.visit(f);
        self.fc_act.visit(f);
        self.fc_se.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.block1.visit_mut(f);
        self.block2.visit_mut(f);
        self.block3.visit_mut(f);
        self.block4.visit_mut(f);
        self.fc.visit_mut(f);
        self.fc_bn.visit_mut(f);
        self.fc_act.visit_mut(f);
        self.fc_se.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
struct VoxBaseline<T> {
    conv1: Conv3d<T>,
    conv2: Conv3d<T>,
    act: LeakyRelu,
    pool: MaxPool3d,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

struct VoxCache<T> {
    c1: Conv3dCache<T>,
    a1: LeakyReluCache<T>,
    c2: Conv3dCache<T>,
    a2: LeakyReluCache<T>,
    pool: MaxPoolCache,
    flat_shape: Vec<usize>,
    fc1: LinearCache<T>,
    a3: LeakyReluCache<T>,
    dropout: Option<DropoutCache<T>>,
    fc2: LinearCache<T>,
}

impl<T: Scalar> VoxBaseline<T> {
    fn new(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let c = &spec.conv_channels;
        let flat = spec.flatten_width()?;
        Ok(Self {
            conv1: Conv3d::new("conv1", 1, c[0], 5, 2, 0, rng),
            conv2: Conv3d::new("conv2", c[0], c[1], 3, 1, 0, rng),
            act: LeakyRelu::new(VOXNET_LEAKY_SLOPE),
            pool: MaxPool3d::new(2),
            fc1: Linear::new("fc1", flat, spec.branch_width, rng),
            fc2: Linear::new("fc2", spec.branch_width, spec.classes, rng),
        })
    }

    fn forward_train(
        &mut self,
        x: &Tensor<T>,
        dropout: Option<&Dropout>,
        rng: &mut impl Rng,
    ) -> (Tensor<T>, VoxCache<T>) {
        let (y, c1) = self.conv1.forward(x);
        let (y, a1) = self.act.forward(&y);
        let (y, c2) = self.conv2.forward(&y);
        let (y, a2) = self.act.forward(&y);
        let (y, pool) = self.pool.forward(&y);
        let flat_shape = y.shape().to_vec();
        let b = flat_shape[0];
        let y = y.reshaped(&[b, y.len() / b]).expect("flatten preserves volume");
        let (y, fc1) = self.fc1.forward(&y);
        let (y, a3) = self.act.forward(&y);
        let (y, drop_cache) = match dropout {
            Some(d) => {
                let (y, cache) = d.forward_train(&y, rng);
                (y, Some(cache))
            }
            None => (y, None),
        };
        let (y, fc2) = self.fc2.forward(&y);
        (
            y,
            VoxCache {
                c1,
                a1,
                c2,
                a2,
                pool,
                flat_shape,
                fc1,
                a3,
                dropout: drop_cache,
                fc2,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (y, _) = self.conv1.forward(x);
        let (y, _) = self.act.forward(&y);
        let (y, _) = self.conv2.forward(&y);
        let (y, _) = self.act.forward(&y);
        let (y, _) = self.pool.forward(&y);
        let b = y.shape()[0];
        let y = y.reshaped(&[b, y.len() / b]).expect("flatten preserves volume");
        let (y, _) = self.fc1.forward(&y);
        let (y, _) = self.act.forward(&y);
        let (y, _) = self.fc2.forward(&y);
        y
    }

    fn backward(
        &mut self,
        cache: &VoxCache<T>,
        dropout: Option<&Dropout>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let dy = self.fc2.backward(&cache.fc2, dy);
        let dy = match (&cache.dropout, dropout) {
            (Some(mask), Some(d)) => d.backward(mask, &dy),
            _ => dy,
        };
        let dy = self.act.backward(&cache.a3, &dy);
        let dy = self.fc1.backward(&cache.fc1, &dy);
        let dy = dy
            .reshaped(&cache.flat_shape)
            .expect("unflatten preserves volume");
        let dy = self.pool.backward(&cache.pool, &dy);
        let dy = self.act.backward(&cache.a2, &dy);
        let dy = self.conv2.backward(&cache.c2, &dy);
        let dy = self.act.backward(&cache.a1, &dy);
        self.conv1.backward(&cache.c1, &dy)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum Net<T> {
    Dvs {
        branches: Vec<DvsBranch<T>>,
        head: Linear<T>,
    },
    Vox(VoxBaseline<T>),
}

/// Caches from one training forward pass, consumed by `backward`.
pub struct TrainCache<T> {
    detail: CacheDetail<T>,
}

enum CacheDetail<T> {
    Dvs {
        branches: Vec<DvsBranchCache<T>>,
        dropout: Option<DropoutCache<T>>,
        head: LinearCache<T>,
    },
    Vox(VoxCache<T>),
}

/// A complete network with its structural description.
pub struct Model<T> {
    spec: ModelSpec,
    dropout: Option<Dropout>,
    net: Net<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network described by `spec`, drawing every parameter from
    /// a generator seeded with `seed`. Weights and biases are uniform in
    /// `±1/sqrt(fan_in)`; draws happen in f64 before conversion, so f32 and
    /// f64 models from the same seed agree to rounding.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match spec.kind {
            ArchKind::MsDvs => {
                let branches = (0..spec.k())
                    .map(|i| DvsBranch::new(&format!("branch{i}"), spec, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let head = Linear::new("head", spec.concat_width()?, spec.classes, &mut rng);
                Net::Dvs { branches, head }
            }
            ArchKind::VoxNet => Net::Vox(VoxBaseline::new(spec, &mut rng)?),
        };
        Ok(Self {
            spec: spec.clone(),
            dropout: spec.dropout.map(Dropout::new),
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_input(&self, input: &BatchInput<T>) -> Result<()> {
        if input.grids.len() != self.spec.k() {
            return Err(Error::ShapeMismatch(format!(
                "{} input scales for a {}-scale network",
                input.grids.len(),
                self.spec.k()
            )));
        }
        let b = input.batch_size();
        let n = self.spec.grid_n;
        for (i, g) in input.grids.iter().enumerate() {
            if g.shape() != [b, 1, n, n, n] {
                return Err(Error::ShapeMismatch(format!(
                    "scale {i} batch tensor has shape {:?}, expected {:?}",
                    g.shape(),
                    [b, 1, n, n, n]
                )));
            }
        }
        Ok(())
    }

    /// Training forward pass: batch statistics in the normalization layers
    /// (unless frozen), dropout active when configured. Returns logits and
    /// the caches backward needs.
    pub fn forward_train(
        &mut self,
        input: &BatchInput<T>,
        batch_stats: bool,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, TrainCache<T>)> {
        self.check_input(input)?;
        let b = input.batch_size();
        match &mut self.net {
            Net::Dvs { branches, head } => {
                let k = branches.len();
                let width = self.spec.branch_width;
                let mut caches = Vec::with_capacity(k);
                let mut concat = Tensor::zeros(&[b, k * width]);
                for (i, branch) in branches.iter_mut().enumerate() {
                    let (y, cache) = branch.forward_train(&input.grids[i], batch_stats);
                    caches.push(cache);
                    let cd = concat.data_mut();
                    let yd = y.data();
                    for bi in 0..b {
                        cd[bi * k * width + i * width..bi * k * width + (i + 1) * width]
                            .copy_from_slice(&yd[bi * width..(bi + 1) * width]);
                    }
                }
                let (concat, drop_cache) = match &self.dropout {
                    Some(d) => {
                        let (y, cache) = d.forward_train(&concat, rng);
                        (y, Some(cache))
                    }
                    None => (concat, None),
                };
                let (logits, head_cache) = head.forward(&concat);
                Ok((
                    logits,
                    TrainCache {
                        detail: CacheDetail::Dvs {
                            branches: caches,
                            dropout: drop_cache,
                            head: head_cache,
                        },
                    },
                ))
            }
            Net::Vox(vox) => {
                let (logits, cache) =
                    vox.forward_train(&input.grids[0], self.dropout.as_ref(), rng);
                Ok((
                    logits,
                    TrainCache {
                        detail: CacheDetail::Vox(cache),
                    },
                ))
            }
        }
    }

    /// Inference logits: running statistics, no dropout, no caches kept.
    pub fn forward_eval(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let b = input.batch_size();
        Ok(match &self.net {
            Net::Dvs { branches, head } => {
                let width = self.spec.branch_width;
                let k = branches.len();
                let mut concat = Tensor::zeros(&[b, k * width]);
                for (i, branch) in branches.iter().enumerate() {
                    let y = branch.forward_eval(&input.grids[i]);
                    let cd = concat.data_mut();
                    let yd = y.data();
                    for bi in 0..b {
                        cd[bi * k * width + i * width..bi * k * width + (i + 1) * width]
                            .copy_from_slice(&yd[bi * width..(bi + 1) * width]);
                    }
                }
                let (logits, _) = head.forward(&concat);
                logits
            }
            Net::Vox(vox) => vox.forward_eval(&input.grids[0]),
        })
    }

    /// Class probabilities: softmax over the inference logits.
    pub fn predict_proba(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        Ok(softmax_rows(&self.forward_eval(input)?))
    }

    /// Accumulates parameter gradients from upstream logit gradients.
    pub fn backward(&mut self, cache: &TrainCache<T>, dlogits: &Tensor<T>) {
        match (&mut self.net, &cache.detail) {
            (
                Net::Dvs { branches, head },
                CacheDetail::Dvs {
                    branches: branch_caches,
                    dropout: drop_cache,
                    head: head_cache,
                },
            ) => {
                let dconcat = head.backward(head_cache, dlogits);
                let dconcat = match (&self.dropout, drop_cache) {
                    (Some(d), Some(mask)) => d.backward(mask, &dconcat),
                    _ => dconcat,
                };
                let b = dconcat.shape()[0];
                let width = self.spec.branch_width;
                let k = branches.len();
                for (i, (branch, bc)) in branches.iter_mut().zip(branch_caches).enumerate() {
                    let mut dslice = Tensor::zeros(&[b, width]);
                    {
                        let dd = dslice.data_mut();
                        let cd = dconcat.data();
                        for bi in 0..b {
                            dd[bi * width..(bi + 1) * width].copy_from_slice(
                                &cd[bi * k * width + i * width..bi * k * width + (i + 1) * width],
                            );
                        }
                    }
                    let _ = branch.backward(bc, &dslice);
                }
            }
            (Net::Vox(vox), CacheDetail::Vox(vc)) => {
                let dropout = self.dropout;
                let _ = vox.backward(vc, dropout.as_ref(), dlogits);
            }
            _ => panic!("cache does not belong to this architecture"),
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Visits every parameter (running statistics included) in a fixed
    /// order shared by all models of the same spec.
    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.net {
            Net::Dvs { branches, head } => {
                for b in branches {
                    b.visit(f);
                }
                head.visit(f);
            }
            Net::Vox(vox) => vox.visit(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.net {
            Net::Dvs { branches, head } => {
                for b in branches {
                    b.visit_mut(f);
                }
                head.visit_mut(f);
            }
            Net::Vox(vox) => vox.visit_mut(f),
        }
    }

    /// Number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| {
            if p.trainable() {
                count += p.value.len();
            }
        });
        count
    }

    /// Copies every parameter tensor out, keyed by path.
    pub fn export(&self) -> ParameterStore<T> {
        let mut store = ParameterStore::new();
        self.visit_params(&mut |p| {
            store.insert(p.path(), p.value.clone());
        });
        store
    }

    /// Loads parameters by path. Keys prefixed `optim.` are ignored (they
    /// belong to the optimizer); any other unknown or missing key is an
    /// error, as is a shape mismatch.
    pub fn import(&mut self, store: &ParameterStore<T>) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut problem = None;
        self.visit_params_mut(&mut |p| {
            if problem.is_some() {
                return;
            }
            seen.insert(p.path().to_string());
            match store.get(p.path()) {
                None => problem = Some(format!("missing tensor {}", p.path())),
                Some(t) if t.shape() != p.value.shape() => {
                    problem = Some(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        p.path(),
                        t.shape(),
                        p.value.shape()
                    ))
                }
                Some(t) => p.value = t.clone(),
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        for key in store.paths() {
            if !key.starts_with("optim.") && !seen.contains(key) {
                return Err(Error::Checkpoint(format!("unknown tensor {key}")));
            }
        }
        Ok(())
    }

    /// Rebuilds the same model at another precision, converting every
    /// parameter tensor.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.spec, 0).expect("spec was already validated");
        let mut cast_store = ParameterStore::<U>::new();
        self.visit_params(&mut |p| {
            cast_store.insert(p.path(), p.value.cast());
        });
        out.import(&cast_store).expect("paths and shapes match");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sc;

    fn input_for<T: Scalar>(spec: &ModelSpec, b: usize, seed: u64) -> BatchInput<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.grid_n;
        let grids = (0..spec.k())
            .map(|_| {
                let mut t = Tensor::zeros(&[b, 1, n, n, n]);
                for v in t.data_mut() {
                    if rng.random_bool(0.3) {
                        *v = T::one();
                    }
                }
                t
            })
            .collect();
        BatchInput {
            grids,
            labels: (0..b as Label).map(|i| i % spec.classes as Label).collect(),
        }
    }

    #[test]
    fn full_network_branch_trace() {
        let spec = ModelSpec::ms_dvs(&[0.05, 0.1, 0.15], 9);
        assert_eq!(spec.branch_trace().unwrap(), vec![32, 30, 28, 14, 12, 10, 5]);
        assert_eq!(spec.flatten_width().unwrap(), 8000);
        assert_eq!(spec.concat_width().unwrap(), 3072);
        spec.validate().unwrap();
    }

    #[test]
    fn reduced_network_branch_trace() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.2], 3);
        assert_eq!(spec.branch_trace().unwrap(), vec![8, 8, 8, 4, 4, 4, 2]);
        assert_eq!(spec.flatten_width().unwrap(), 64);
        assert_eq!(spec.concat_width().unwrap(), 64);
        spec.validate().unwrap();
    }

    #[test]
    fn baseline_trace_and_parameter_count() {
        let spec = ModelSpec::voxnet(0.1, 8);
        assert_eq!(spec.branch_trace().unwrap(), vec![32, 14, 12, 6]);
        assert_eq!(spec.flatten_width().unwrap(), 6912);
        let model = Model::<f32>::build(&spec, 1).unwrap();
        assert_eq!(model.param_count(), 917_608);
    }

    #[test]
    fn unpadded_reduced_grid_is_rejected() {
        let mut spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        spec.conv_padding = 0;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        let good = ModelSpec::ms_dvs(&[0.1], 5);
        let mut s = good.clone();
        s.classes = 1;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.deltas = vec![0.2, 0.1];
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.conv_channels = vec![32, 32];
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.dropout = Some(1.0);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::voxnet(0.1, 5);
        s.deltas = vec![0.1, 0.2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn eval_logits_have_class_width_and_are_finite_on_zero_grids() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.2, 0.3], 9);
        let model = Model::<f32>::build(&spec, 7).unwrap();
        let mut input = input_for::<f32>(&spec, 2, 3);
        for g in &mut input.grids {
            g.fill(0.0);
        }
        let logits = model.forward_eval(&input).unwrap();
        assert_eq!(logits.shape(), &[2, 9]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        let proba = model.predict_proba(&input).unwrap();
        for bi in 0..2 {
            let s: f32 = proba.data()[bi * 9..(bi + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_is_per_sample_independent() {
        // Two copies of the same grids in one batch must produce identical
        // rows: inference must not leak anything across the batch.
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.2], 4);
        let model = Model::<f32>::build(&spec, 11).unwrap();
        let single = input_for::<f32>(&spec, 1, 5);
        let mut double = input_for::<f32>(&spec, 2, 99);
        for (d, s) in double.grids.iter_mut().zip(&single.grids) {
            let vol = s.len();
            d.data_mut()[..vol].copy_from_slice(s.data());
            d.data_mut()[vol..].copy_from_slice(s.data());
        }
        let logits = model.forward_eval(&double).unwrap();
        let row0 = &logits.data()[..4];
        let row1 = &logits.data()[4..];
        assert_eq!(row0, row1);
        let alone = model.forward_eval(&single).unwrap();
        assert_eq!(alone.data(), row0);
    }

    #[test]
    fn train_forward_shapes_and_determinism() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.2], 4);
        let input = input_for::<f32>(&spec, 3, 17);
        let run = || {
            let mut model = Model::<f32>::build(&spec, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (logits, cache) = model.forward_train(&input, true, &mut rng).unwrap();
            let mut dlogits = Tensor::zeros(logits.shape());
            dlogits.fill(0.1);
            model.backward(&cache, &dlogits);
            let mut grads = Vec::new();
            model.visit_params(&mut |p| grads.extend(p.grad.data().iter().map(|g| g.to_bits())));
            (logits, grads)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.shape(), &[3, 4]);
        assert_eq!(
            l1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            l2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_upstream_gradient_leaves_zero_parameter_gradients() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let mut model = Model::<f64>::build(&spec, 3).unwrap();
        let input = input_for::<f64>(&spec, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, cache) = model.forward_train(&input, true, &mut rng).unwrap();
        model.zero_grads();
        let dlogits = Tensor::zeros(logits.shape());
        model.backward(&cache, &dlogits);
        model.visit_params(&mut |p| {
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.path());
        });
    }

    #[test]
    fn export_import_round_trip_is_exact() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.2], 5);
        let model = Model::<f32>::build(&spec, 41).unwrap();
        let store = model.export();
        let mut other = Model::<f32>::build(&spec, 999).unwrap();
        other.import(&store).unwrap();
        let input = input_for::<f32>(&spec, 2, 1);
        let a = model.forward_eval(&input).unwrap();
        let b = other.forward_eval(&input).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn import_rejects_missing_and_unknown_tensors() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let model = Model::<f32>::build(&spec, 1).unwrap();
        let mut store = model.export();
        store.insert("optim.m.head.weight", Tensor::zeros(&[1]));
        let mut target = Model::<f32>::build(&spec, 2).unwrap();
        target.import(&store).unwrap();

        store.insert("bogus.weight", Tensor::zeros(&[1]));
        assert!(matches!(
            target.import(&store),
            Err(Error::Checkpoint(_))
        ));

        let mut partial = model.export();
        partial.remove("head.bias");
        assert!(matches!(
            target.import(&partial),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn cast_preserves_values_to_rounding() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let model = Model::<f32>::build(&spec, 13).unwrap();
        let model64 = model.cast::<f64>();
        let mut pairs = Vec::new();
        model.visit_params(&mut |p| pairs.push(p.value.data().to_vec()));
        let mut i = 0;
        model64.visit_params(&mut |p| {
            for (a, &b) in pairs[i].iter().zip(p.value.data()) {
                assert_eq!(*a as f64, b);
            }
            i += 1;
        });
    }

    #[test]
    fn dropout_changes_train_forward_but_not_eval() {
        let mut spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        spec.dropout = Some(0.5);
        let mut model = Model::<f32>::build(&spec, 21).unwrap();
        let input = input_for::<f32>(&spec, 2, 2);
        let mut rng_a = ChaCha8Rng::seed_from_u64(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(2);
        let (la, _) = model.forward_train(&input, true, &mut rng_a).unwrap();
        let (lb, _) = model.forward_train(&input, true, &mut rng_b).unwrap();
        assert_ne!(la.data(), lb.data());
        let e1 = model.forward_eval(&input).unwrap();
        let e2 = model.forward_eval(&input).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn frozen_batch_stats_keep_running_stats_fixed() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let mut model = Model::<f64>::build(&spec, 31).unwrap();
        let input = input_for::<f64>(&spec, 2, 4);
        let before: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            model.visit_params(&mut |p| {
                if p.path().contains("running") {
                    v.push(p.value.data().to_vec());
                }
            });
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = model.forward_train(&input, false, &mut rng).unwrap();
        let mut i = 0;
        model.visit_params(&mut |p| {
            if p.path().contains("running") {
                assert_eq!(before[i], p.value.data());
                i += 1;
            }
        });
    }

    #[test]
    fn sc_helper_round_trips() {
        let x: f32 = sc(0.25);
        assert_eq!(x, 0.25f32);
    }
}
