//! Network layers with explicit forward and backward passes.
//!
//! Activation tensors are `[B, C, X, Y, Z]` for volumetric layers and
//! `[B, F]` for fully connected ones. Channel-wise layers (batch norm,
//! PReLU, squeeze-excitation) view both as `[B, C, S]` with `S` the spatial
//! volume, so fully connected features count as channels of spatial size
//! one. Every backward accumulates parameter gradients and returns the
//! gradient with respect to its input. Batch-parallel code always reduces
//! per-sample partials in sample order, keeping results independent of the
//! worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::nn::tensor::Tensor;
use crate::nn::{sc, Scalar};

/// A named parameter tensor with its gradient buffer. Non-trainable entries
/// (batch norm running statistics) are checkpointed but skipped by the
/// optimizer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    path: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(path: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        Self {
            path: path.into(),
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            trainable,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn init_uniform(&mut self, bound: f64, rng: &mut impl Rng) {
        for v in self.value.data_mut() {
            *v = sc(rng.random_range(-bound..bound));
        }
    }
}

/// Channel view of an activation tensor: batch, channels, spatial volume.
fn view_bcs(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [b, f] => (*b, *f, 1),
        [b, c, rest @ ..] => (*b, *c, rest.iter().product()),
        other => panic!("activation tensor must have at least 2 dims, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

pub struct Conv3dCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut weight = Param::new(format!("{prefix}.weight"), &[out_c, in_c, k, k, k], true);
        let mut bias = Param::new(format!("{prefix}.bias"), &[out_c], true);
        weight.init_uniform(bound, rng);
        bias.init_uniform(bound, rng);
        Self {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Conv3dCache<T>) {
        let &[b, in_c, xs, ys, zs] = x.shape() else {
            panic!("conv input must be 5d, got {:?}", x.shape());
        };
        assert_eq!(in_c, self.in_c, "conv channel mismatch");
        let (ox, oy, oz) = (self.out_size(xs), self.out_size(ys), self.out_size(zs));
        let mut y = Tensor::zeros(&[b, self.out_c, ox, oy, oz]);

        let (k, stride, pad) = (self.k, self.stride, self.pad as isize);
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let xd = x.data();
        let in_sample = in_c * xs * ys * zs;
        let out_sample = self.out_c * ox * oy * oz;
        let out_c = self.out_c;
        let in_cc = self.in_c;

        y.data_mut()
            .par_chunks_mut(out_sample)
            .enumerate()
            .for_each(|(bi, yb)| {
                let xb = &xd[bi * in_sample..(bi + 1) * in_sample];
                let mut o = 0;
                for oc in 0..out_c {
                    let woc = &w[oc * in_cc * k * k * k..(oc + 1) * in_cc * k * k * k];
                    for vx in 0..ox {
                        for vy in 0..oy {
                            for vz in 0..oz {
                                let mut acc = bias[oc];
                                for ic in 0..in_cc {
                                    let wic = &woc[ic * k * k * k..(ic + 1) * k * k * k];
                                    let xic = &xb[ic * xs * ys * zs..(ic + 1) * xs * ys * zs];
                                    for kx in 0..k {
                                        let ix = (vx * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= xs as isize {
                                            continue;
                                        }
                                        for ky in 0..k {
                                            let iy = (vy * stride + ky) as isize - pad;
                                            if iy < 0 || iy >= ys as isize {
                                                continue;
                                            }
                                            let xrow =
                                                (ix as usize * ys + iy as usize) * zs;
                                            let wrow = (kx * k + ky) * k;
                                            for kz in 0..k {
                                                let iz =
                                                    (vz * stride + kz) as isize - pad;
                                                if iz < 0 || iz >= zs as isize {
                                                    continue;
                                                }
                                                acc += wic[wrow + kz]
                                                    * xic[xrow + iz as usize];
                                            }
                                        }
                                    }
                                }
                                yb[o] = acc;
                                o += 1;
                            }
                        }
                    }
                }
            });

        (y, Conv3dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv3dCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let x = &cache.x;
        let &[b, _, xs, ys, zs] = x.shape() else {
            panic!("conv cache must be 5d");
        };
        let &[_, _, ox, oy, oz] = dy.shape() else {
            panic!("conv upstream gradient must be 5d");
        };
        let mut dx = Tensor::zeros(x.shape());

        let (k, stride, pad) = (self.k, self.stride, self.pad as isize);
        let w = self.weight.value.data();
        let xd = x.data();
        let dyd = dy.data();
        let in_sample = self.in_c * xs * ys * zs;
        let out_sample = self.out_c * ox * oy * oz;
        let (out_c, in_c) = (self.out_c, self.in_c);
        let wlen = self.weight.value.len();

        let partials: Vec<(Vec<T>, Vec<T>)> = dx
            .data_mut()
            .par_chunks_mut(in_sample)
            .enumerate()
            .map(|(bi, dxb)| {
                let xb = &xd[bi * in_sample..(bi + 1) * in_sample];
                let dyb = &dyd[bi * out_sample..(bi + 1) * out_sample];
                let mut dwb = vec![T::zero(); wlen];
                let mut dbb = vec![T::zero(); out_c];
                let mut o = 0;
                for oc in 0..out_c {
                    let woc = &w[oc * in_c * k * k * k..(oc + 1) * in_c * k * k * k];
                    let dwoc = &mut dwb[oc * in_c * k * k * k..(oc + 1) * in_c * k * k * k];
                    for vx in 0..ox {
                        for vy in 0..oy {
                            for vz in 0..oz {
                                let g = dyb[o];
                                o += 1;
                                if g == T::zero() {
                                    continue;
                                }
                                dbb[oc] += g;
                                for ic in 0..in_c {
                                    let wic = &woc[ic * k * k * k..(ic + 1) * k * k * k];
                                    let dwic =
                                        &mut dwoc[ic * k * k * k..(ic + 1) * k * k * k];
                                    let xoff = ic * xs * ys * zs;
                                    for kx in 0..k {
                                        let ix = (vx * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= xs as isize {
                                            continue;
                                        }
                                        for ky in 0..k {
                                            let iy = (vy * stride + ky) as isize - pad;
                                            if iy < 0 || iy >= ys as isize {
                                                continue;
                                            }
                                            let row = xoff
                                                + (ix as usize * ys + iy as usize) * zs;
                                            let wrow = (kx * k + ky) * k;
                                            for kz in 0..k {
                                                let iz =
                                                    (vz * stride + kz) as isize - pad;
                                                if iz < 0 || iz >= zs as isize {
                                                    continue;
                                                }
                                                let xi = row + iz as usize;
                                                dwic[wrow + kz] += g * xb[xi];
                                                dxb[xi] += g * wic[wrow + kz];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (dwb, dbb)
            })
            .collect();

        debug_assert_eq!(partials.len(), b);
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        for (dwb, dbb) in partials {
            for (dst, src) in dw.iter_mut().zip(dwb) {
                *dst += src;
            }
            for (dst, src) in db.iter_mut().zip(dbb) {
                *dst += src;
            }
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_f: usize,
    out_f: usize,
}

pub struct LinearCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        let mut weight = Param::new(format!("{prefix}.weight"), &[out_f, in_f], true);
        let mut bias = Param::new(format!("{prefix}.bias"), &[out_f], true);
        weight.init_uniform(bound, rng);
        bias.init_uniform(bound, rng);
        Self {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LinearCache<T>) {
        let &[b, in_f] = x.shape() else {
            panic!("linear input must be 2d, got {:?}", x.shape());
        };
        assert_eq!(in_f, self.in_f, "linear feature mismatch");
        let mut y = Tensor::zeros(&[b, self.out_f]);
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let xd = x.data();
        let out_f = self.out_f;
        y.data_mut()
            .par_chunks_mut(out_f)
            .enumerate()
            .for_each(|(bi, yb)| {
                let xb = &xd[bi * in_f..(bi + 1) * in_f];
                for (o, slot) in yb.iter_mut().enumerate() {
                    let wrow = &w[o * in_f..(o + 1) * in_f];
                    let mut acc = bias[o];
                    for (wv, xv) in wrow.iter().zip(xb) {
                        acc += *wv * *xv;
                    }
                    *slot = acc;
                }
            });
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let x = &cache.x;
        let &[b, in_f] = x.shape() else {
            panic!("linear cache must be 2d");
        };
        let out_f = self.out_f;
        let xd = x.data();
        let dyd = dy.data();

        {
            let dw = self.weight.grad.data_mut();
            let db = self.bias.grad.data_mut();
            for bi in 0..b {
                let xb = &xd[bi * in_f..(bi + 1) * in_f];
                let dyb = &dyd[bi * out_f..(bi + 1) * out_f];
                for (o, &g) in dyb.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    db[o] += g;
                    let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
                    for (slot, xv) in dwrow.iter_mut().zip(xb) {
                        *slot += g * *xv;
                    }
                }
            }
        }

        let mut dx = Tensor::zeros(x.shape());
        let w = self.weight.value.data();
        dx.data_mut()
            .par_chunks_mut(in_f)
            .enumerate()
            .for_each(|(bi, dxb)| {
                let dyb = &dyd[bi * out_f..(bi + 1) * out_f];
                for (o, &g) in dyb.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    let wrow = &w[o * in_f..(o + 1) * in_f];
                    for (slot, wv) in dxb.iter_mut().zip(wrow) {
                        *slot += g * *wv;
                    }
                }
            });
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    channels: usize,
}

pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let mut gamma = Param::new(format!("{prefix}.gamma"), &[channels], true);
        gamma.value.fill(T::one());
        let beta = Param::new(format!("{prefix}.beta"), &[channels], true);
        let running_mean = Param::new(format!("{prefix}.running_mean"), &[channels], false);
        let mut running_var = Param::new(format!("{prefix}.running_var"), &[channels], false);
        running_var.value.fill(T::one());
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        }
    }

    /// Training forward. With `batch_stats` the batch mean/variance are used
    /// and the running statistics updated; without it the running statistics
    /// normalize (still producing a cache so gradients can flow with the
    /// normalizer frozen).
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        batch_stats: bool,
    ) -> (Tensor<T>, BatchNormCache<T>) {
        let (b, c, s) = view_bcs(x.shape());
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let n = b * s;
        let xd = x.data();

        let (means, vars) = if batch_stats {
            let mut means = vec![T::zero(); c];
            let mut vars = vec![T::zero(); c];
            for ci in 0..c {
                let mut sum = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        sum += xd[base + si];
                    }
                }
                means[ci] = sum / sc(n as f64);
            }
            for ci in 0..c {
                let mut sum = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        let d = xd[base + si] - means[ci];
                        sum += d * d;
                    }
                }
                vars[ci] = sum / sc(n as f64);
            }
            let momentum: T = sc(BN_MOMENTUM);
            let keep = T::one() - momentum;
            let unbias = if n > 1 {
                sc::<T>(n as f64 / (n as f64 - 1.0))
            } else {
                T::one()
            };
            for ci in 0..c {
                let rm = &mut self.running_mean.value.data_mut()[ci];
                *rm = keep * *rm + momentum * means[ci];
                let rv = &mut self.running_var.value.data_mut()[ci];
                *rv = keep * *rv + momentum * vars[ci] * unbias;
            }
            (means, vars)
        } else {
            (
                self.running_mean.value.data().to_vec(),
                self.running_var.value.data().to_vec(),
            )
        };

        let inv_std: Vec<T> = vars
            .iter()
            .map(|&v| T::one() / (v + sc(BN_EPS)).sqrt())
            .collect();
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        {
            let yd = y.data_mut();
            let xh = xhat.data_mut();
            let gamma = self.gamma.value.data();
            let beta = self.beta.value.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        let h = (xd[base + si] - means[ci]) * inv_std[ci];
                        xh[base + si] = h;
                        yd[base + si] = gamma[ci] * h + beta[ci];
                    }
                }
            }
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Inference forward using the running statistics; no state is touched.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, s) = view_bcs(x.shape());
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let mut y = Tensor::zeros(x.shape());
        let xd = x.data();
        let yd = y.data_mut();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mean = self.running_mean.value.data();
        let var = self.running_var.value.data();
        for bi in 0..b {
            for ci in 0..c {
                let inv = T::one() / (var[ci] + sc(BN_EPS)).sqrt();
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    yd[base + si] = gamma[ci] * (xd[base + si] - mean[ci]) * inv + beta[ci];
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (b, c, s) = view_bcs(dy.shape());
        let n = b * s;
        let dyd = dy.data();
        let xh = cache.xhat.data();

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    sum_dy[ci] += dyd[base + si];
                    sum_dy_xhat[ci] += dyd[base + si] * xh[base + si];
                }
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += sum_dy_xhat[ci];
            self.beta.grad.data_mut()[ci] += sum_dy[ci];
        }

        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        if cache.batch_stats {
            let inv_n: T = T::one() / sc(n as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    let scale = gamma[ci] * cache.inv_std[ci];
                    for si in 0..s {
                        let i = base + si;
                        dxd[i] = scale
                            * (dyd[i]
                                - sum_dy[ci] * inv_n
                                - xh[i] * sum_dy_xhat[ci] * inv_n);
                    }
                }
            }
        } else {
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    let scale = gamma[ci] * cache.inv_std[ci];
                    for si in 0..s {
                        dxd[base + si] = scale * dyd[base + si];
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct PRelu<T> {
    pub slope: Param<T>,
    channels: usize,
}

pub struct PReluCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let mut slope = Param::new(format!("{prefix}.slope"), &[channels], true);
        slope.value.fill(sc(PRELU_INIT));
        Self { slope, channels }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, PReluCache<T>) {
        let (b, c, s) = view_bcs(x.shape());
        assert_eq!(c, self.channels, "prelu channel mismatch");
        let mut y = Tensor::zeros(x.shape());
        let xd = x.data();
        let yd = y.data_mut();
        let a = self.slope.value.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    let v = xd[base + si];
                    yd[base + si] = if v > T::zero() { v } else { a[ci] * v };
                }
            }
        }
        (y, PReluCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &PReluCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (b, c, s) = view_bcs(dy.shape());
        let xd = cache.x.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        let a = self.slope.value.data();
        let da = self.slope.grad.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    let i = base + si;
                    if xd[i] > T::zero() {
                        dxd[i] = dyd[i];
                    } else {
                        dxd[i] = dyd[i] * a[ci];
                        da[ci] += dyd[i] * xd[i];
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.slope);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.slope);
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

pub const SE_RATIO: usize = 16;

#[derive(Debug, Clone)]
pub struct SqueezeExcite<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    channels: usize,
}

pub struct SeCache<T> {
    x: Tensor<T>,
    h: Tensor<T>,
    g: Tensor<T>,
    fc1: LinearCache<T>,
    fc2: LinearCache<T>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(prefix: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let bottleneck = (channels / ratio).max(1);
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), channels, bottleneck, rng),
            fc2: Linear::new(&format!("{prefix}.fc2"), bottleneck, channels, rng),
            channels,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.fc1.out_f
    }

    /// Shared by train and eval: the block has no mode-dependent behavior.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, SeCache<T>) {
        let (b, c, s) = view_bcs(x.shape());
        assert_eq!(c, self.channels, "squeeze-excitation channel mismatch");
        let xd = x.data();

        let mut z = Tensor::zeros(&[b, c]);
        {
            let zd = z.data_mut();
            let inv_s: T = T::one() / sc(s as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    let mut sum = T::zero();
                    for si in 0..s {
                        sum += xd[base + si];
                    }
                    zd[bi * c + ci] = sum * inv_s;
                }
            }
        }

        let (mut h, fc1_cache) = self.fc1.forward(&z);
        for v in h.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let (mut g, fc2_cache) = self.fc2.forward(&h);
        for v in g.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }

        let mut y = Tensor::zeros(x.shape());
        {
            let yd = y.data_mut();
            let gd = g.data();
            for bi in 0..b {
                for ci in 0..c {
                    let gate = gd[bi * c + ci];
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        yd[base + si] = xd[base + si] * gate;
                    }
                }
            }
        }
        (
            y,
            SeCache {
                x: x.clone(),
                h,
                g,
                fc1: fc1_cache,
                fc2: fc2_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &SeCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (b, c, s) = view_bcs(dy.shape());
        let xd = cache.x.data();
        let gd = cache.g.data();
        let dyd = dy.data();

        let mut dx = Tensor::zeros(dy.shape());
        let mut dg = Tensor::zeros(&[b, c]);
        {
            let dxd = dx.data_mut();
            let dgd = dg.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let gate = gd[bi * c + ci];
                    let base = (bi * c + ci) * s;
                    let mut acc = T::zero();
                    for si in 0..s {
                        let i = base + si;
                        dxd[i] = dyd[i] * gate;
                        acc += dyd[i] * xd[i];
                    }
                    dgd[bi * c + ci] = acc;
                }
            }
        }

        // Through the sigmoid, the bottleneck and the squeeze.
        {
            let dgd = dg.data_mut();
            for (slot, &gate) in dgd.iter_mut().zip(gd) {
                *slot = *slot * gate * (T::one() - gate);
            }
        }
        let mut dh = self.fc2.backward(&cache.fc2, &dg);
        for (slot, &hv) in dh.data_mut().iter_mut().zip(cache.h.data()) {
            if hv <= T::zero() {
                *slot = T::zero();
            }
        }
        let dz = self.fc1.backward(&cache.fc1, &dh);

        {
            let dxd = dx.data_mut();
            let dzd = dz.data();
            let inv_s: T = T::one() / sc(s as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let spread = dzd[bi * c + ci] * inv_s;
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        dxd[base + si] += spread;
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MaxPool3d {
    k: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool3d {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - self.k) / self.k + 1
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, MaxPoolCache) {
        let &[b, c, xs, ys, zs] = x.shape() else {
            panic!("pool input must be 5d, got {:?}", x.shape());
        };
        let k = self.k;
        let (ox, oy, oz) = (self.out_size(xs), self.out_size(ys), self.out_size(zs));
        let mut y = Tensor::zeros(&[b, c, ox, oy, oz]);
        let mut argmax = vec![0usize; y.len()];
        let xd = x.data();
        let yd = y.data_mut();
        let mut o = 0;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * xs * ys * zs;
                for vx in 0..ox {
                    for vy in 0..oy {
                        for vz in 0..oz {
                            let mut best = T::neg_infinity();
                            let mut best_i = 0;
                            for kx in 0..k {
                                for ky in 0..k {
                                    for kz in 0..k {
                                        let i = base
                                            + ((vx * k + kx) * ys + vy * k + ky) * zs
                                            + vz * k
                                            + kz;
                                        if xd[i] > best {
                                            best = xd[i];
                                            best_i = i;
                                        }
                                    }
                                }
                            }
                            yd[o] = best;
                            argmax[o] = best_i;
                            o += 1;
                        }
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                in_shape: x.shape().to_vec(),
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &MaxPoolCache, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&cache.in_shape);
        let dxd = dx.data_mut();
        for (o, &i) in cache.argmax.iter().enumerate() {
            dxd[i] += dy.data()[o];
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Leaky ReLU (fixed slope, parameter free)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu {
    slope: f64,
}

pub struct LeakyReluCache<T> {
    x: Tensor<T>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope }
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, LeakyReluCache<T>) {
        let a: T = sc(self.slope);
        let mut y = x.clone();
        for v in y.data_mut() {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
        (y, LeakyReluCache { x: x.clone() })
    }

    pub fn backward<T: Scalar>(&self, cache: &LeakyReluCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let a: T = sc(self.slope);
        let mut dx = dy.clone();
        for (slot, &xv) in dx.data_mut().iter_mut().zip(cache.x.data()) {
            if xv <= T::zero() {
                *slot = *slot * a;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    p: f64,
}

pub struct DropoutCache<T> {
    mask: Tensor<T>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability in [0, 1)");
        Self { p }
    }

    pub fn forward_train<T: Scalar>(
        &self,
        x: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> (Tensor<T>, DropoutCache<T>) {
        let keep = 1.0 - self.p;
        let scale: T = sc(1.0 / keep);
        let mut mask = Tensor::zeros(x.shape());
        for v in mask.data_mut() {
            if rng.random_bool(keep) {
                *v = scale;
            }
        }
        let mut y = x.clone();
        for (slot, &m) in y.data_mut().iter_mut().zip(mask.data()) {
            *slot = *slot * m;
        }
        (y, DropoutCache { mask })
    }

    pub fn backward<T: Scalar>(&self, cache: &DropoutCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        for (slot, &m) in dx.data_mut().iter_mut().zip(cache.mask.data()) {
            *slot = *slot * m;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Softmax (inference head)
// ---------------------------------------------------------------------------

/// Row-wise numerically stable softmax over `[B, C]` logits.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let &[b, c] = logits.shape() else {
        panic!("softmax expects 2d logits, got {:?}", logits.shape());
    };
    let mut out = Tensor::zeros(&[b, c]);
    let ld = logits.data();
    let od = out.data_mut();
    for bi in 0..b {
        let row = &ld[bi * c..(bi + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (o, &l) in od[bi * c..(bi + 1) * c].iter_mut().zip(row.iter()) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in &mut od[bi * c..(bi + 1) * c] {
            *o = *o / sum;
        }
    }
    out
}
