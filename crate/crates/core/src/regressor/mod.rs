//! DenseNet-style regressor from one preprocessed projection to subspace
//! weights, with hand-written reverse-mode gradients.
//!
//! Layout: 3×3 stem conv to `2k` channels, then `num_blocks` dense blocks of
//! `L` layers (BN → ReLU → 3×3 conv emitting `k` maps, input = concatenation
//! of everything before it in the block), each followed by a transition
//! (BN → ReLU → 1×1 conv to `⌊compression·c⌋` → 2×2 max pool), then global
//! average pooling and a linear head.
//!
//! All parameters live in one flat vector addressed by a layout table, so the
//! optimiser, gradient checks and checkpoints treat them uniformly.

mod checkpoint;
pub(crate) mod layers;
mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, Range};
use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{l1_loss, train, write_train_log_csv, EpochLog, PlateauScheduler, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use layers::{
    bn_relu_backward, bn_relu_eval, bn_relu_train, conv_backward, conv_forward, maxpool_backward, maxpool_forward,
    BnCache, ConvShape, BN_MOMENTUM,
};

/// Scalar type of the network.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + Send
    + Sync
    + 'static
{
    /// Bytes per value in checkpoints.
    const BYTES: usize;

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: [usize; 2],
        b: &[Self],
        sb: [usize; 2],
        beta: Self,
        c: &mut [Self],
        sc: [usize; 2],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $n:expr) => {
        impl Real for $t {
            const BYTES: usize = $n;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: [usize; 2],
                b: &[Self],
                sb: [usize; 2],
                beta: Self,
                c: &mut [Self],
                sc: [usize; 2],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |r: usize, cc: usize, s: [usize; 2]| (r.max(1) - 1) * s[0] + (cc.max(1) - 1) * s[1];
                assert!(k == 0 || (last(m, k, sa) < a.len() && last(k, n, sb) < b.len()));
                assert!(last(m, n, sc) < c.len());
                // SAFETY: every index reachable through the given strides and
                // extents was bounds-checked above; `c` does not alias `a`/`b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa[0] as isize,
                        sa[1] as isize,
                        b.as_ptr(),
                        sb[0] as isize,
                        sb[1] as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc[0] as isize,
                        sc[1] as isize,
                    )
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("value width"))
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, 4);
impl_real!(f64, matrixmultiply::dgemm, 8);

fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub num_blocks: usize,
    pub compression: f64,
    /// Stem output channels; `2·growth_rate` when 0.
    pub initial_filters: usize,
    pub kernel_size: usize,
    pub output_dim: usize,
    /// Input image `[width, height]` (detector u, v after preprocessing).
    pub input_dims: [usize; 2],
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            growth_rate: 4,
            layers_per_block: 4,
            num_blocks: 4,
            compression: 0.5,
            initial_filters: 0,
            kernel_size: 3,
            output_dim: 2,
            input_dims: [64, 48],
        }
    }
}

impl RegressorConfig {
    pub fn stem_filters(&self) -> usize {
        if self.initial_filters == 0 {
            2 * self.growth_rate
        } else {
            self.initial_filters
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.growth_rate == 0 || self.layers_per_block == 0 || self.num_blocks == 0 {
            return bad("growth rate, layers per block and block count must be ≥ 1".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression must be in (0, 1], got {}", self.compression));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.output_dim == 0 {
            return bad("output dimension must be ≥ 1".into());
        }
        let f = 1usize << self.num_blocks;
        let [w, h] = self.input_dims;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return bad(format!("input {w}×{h} is not divisible by 2^{} = {f}", self.num_blocks));
        }
        for row in self.channel_table() {
            if row.transition_out == 0 {
                return bad(format!("transition of block {} has no channels", row.block));
            }
        }
        Ok(())
    }

    /// Channel and spatial bookkeeping per block.
    pub fn channel_table(&self) -> Vec<BlockShape> {
        let mut c = self.stem_filters();
        let [mut w, mut h] = self.input_dims;
        (0..self.num_blocks)
            .map(|block| {
                let out = c + self.layers_per_block * self.growth_rate;
                let t = (self.compression * out as f64).floor() as usize;
                let row = BlockShape {
                    block,
                    input_channels: c,
                    block_out: out,
                    transition_out: t,
                    width: w,
                    height: h,
                };
                c = t;
                w /= 2;
                h /= 2;
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub block: usize,
    pub input_channels: usize,
    pub block_out: usize,
    pub transition_out: usize,
    /// Spatial size at the block's input.
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
struct Bn {
    c: usize,
    gamma: Range<usize>,
    beta: Range<usize>,
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone)]
struct Conv {
    shape: ConvShape,
    weight: Range<usize>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn: Bn,
    conv: Conv,
}

#[derive(Debug, Clone)]
struct Block {
    shape: BlockShape,
    layers: Vec<DenseLayer>,
    trans_bn: Bn,
    trans_conv: Conv,
}

/// Name and extent of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Conv,
    blocks: Vec<Block>,
    linear_w: Range<usize>,
    linear_b: Range<usize>,
    features: usize,
    params: Vec<ParamEntry>,
    buffers: Vec<ParamEntry>,
    n_params: usize,
    n_buffers: usize,
}

struct Alloc {
    entries: Vec<ParamEntry>,
    next: usize,
}

impl Alloc {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            next: 0,
        }
    }

    fn take(&mut self, name: String, len: usize) -> Range<usize> {
        let r = self.next..self.next + len;
        self.next += len;
        self.entries.push(ParamEntry { name, range: r.clone() });
        r
    }
}

impl Layout {
    fn new(cfg: &RegressorConfig) -> Layout {
        let mut p = Alloc::new();
        let mut b = Alloc::new();
        let bn = |p: &mut Alloc, b: &mut Alloc, name: &str, c: usize| Bn {
            c,
            gamma: p.take(format!("{name}.gamma"), c),
            beta: p.take(format!("{name}.beta"), c),
            mean: b.take(format!("{name}.running_mean"), c),
            var: b.take(format!("{name}.running_var"), c),
        };
        let conv = |p: &mut Alloc, name: &str, shape: ConvShape| Conv {
            weight: p.take(format!("{name}.weight"), shape.cout * shape.cin * shape.ks * shape.ks),
            shape,
        };
        let [w0, h0] = cfg.input_dims;
        let ks = cfg.kernel_size;
        let stem = conv(
            &mut p,
            "stem",
            ConvShape {
                cin: 1,
                cout: cfg.stem_filters(),
                ks,
                h: h0,
                w: w0,
            },
        );
        let mut blocks = Vec::new();
        for shape in cfg.channel_table() {
            let (h, w) = (shape.height, shape.width);
            let layers = (0..cfg.layers_per_block)
                .map(|l| {
                    let cin = shape.input_channels + l * cfg.growth_rate;
                    let name = format!("block{}.layer{}", shape.block, l);
                    DenseLayer {
                        bn: bn(&mut p, &mut b, &format!("{name}.bn"), cin),
                        conv: conv(
                            &mut p,
                            &format!("{name}.conv"),
                            ConvShape {
                                cin,
                                cout: cfg.growth_rate,
                                ks,
                                h,
                                w,
                            },
                        ),
                    }
                })
                .collect();
            let name = format!("block{}.transition", shape.block);
            let trans_bn = bn(&mut p, &mut b, &format!("{name}.bn"), shape.block_out);
            let trans_conv = conv(
                &mut p,
                &format!("{name}.conv"),
                ConvShape {
                    cin: shape.block_out,
                    cout: shape.transition_out,
                    ks: 1,
                    h,
                    w,
                },
            );
            blocks.push(Block {
                shape,
                layers,
                trans_bn,
                trans_conv,
            });
        }
        let features = blocks.last().map_or(0, |b| b.shape.transition_out);
        let linear_w = p.take("head.weight".into(), cfg.output_dim * features);
        let linear_b = p.take("head.bias".into(), cfg.output_dim);
        Layout {
            stem,
            blocks,
            linear_w,
            linear_b,
            features,
            n_params: p.next,
            n_buffers: b.next,
            params: p.entries,
            buffers: b.entries,
        }
    }
}

/// The network plus the target scale that maps its normalised outputs back
/// to raw subspace weights.
#[derive(Debug, Clone)]
pub struct RegressorModel<T: Real = f32> {
    config: RegressorConfig,
    layout: Layout,
    params: Vec<T>,
    buffers: Vec<T>,
    target_scale: Vec<f64>,
}

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deterministic initialisation: He-normal conv kernels (fan-in), unit BN
/// scale, zero BN shift, running variance 1, uniform(±1/√fan-in) linear
/// weights and zero bias.
pub fn build_model<T: Real>(cfg: &RegressorConfig, seed: u64) -> Result<RegressorModel<T>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::zero(); layout.n_params];
    let mut buffers = vec![T::zero(); layout.n_buffers];
    let mut he = |r: &Range<usize>, fan_in: usize, params: &mut Vec<T>| {
        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut params[r.clone()] {
            *v = cast(d.sample(&mut rng));
        }
    };
    let ones = |r: &Range<usize>, v: &mut Vec<T>| v[r.clone()].fill(T::one());
    let s = &layout.stem.shape;
    he(&layout.stem.weight, s.cin * s.ks * s.ks, &mut params);
    for b in &layout.blocks {
        for l in &b.layers {
            ones(&l.bn.gamma, &mut params);
            ones(&l.bn.var, &mut buffers);
            let s = &l.conv.shape;
            he(&l.conv.weight, s.cin * s.ks * s.ks, &mut params);
        }
        ones(&b.trans_bn.gamma, &mut params);
        ones(&b.trans_bn.var, &mut buffers);
        he(&b.trans_conv.weight, b.trans_conv.shape.cin, &mut params);
    }
    let bound = 1.0 / (layout.features as f64).sqrt();
    let u = rand_distr::Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    for v in &mut params[layout.linear_w.clone()] {
        *v = cast(u.sample(&mut rng));
    }
    Ok(RegressorModel {
        config: cfg.clone(),
        layout,
        params,
        buffers,
        target_scale: vec![1.0; cfg.output_dim],
    })
}

/// Everything the backward pass needs from a training-mode forward.
pub struct ForwardCache<T> {
    batch: usize,
    input: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
    pred: Vec<T>,
}

struct BlockCache<T> {
    input_stride: usize,
    layers: Vec<(Vec<T>, BnCache<T>)>,
    trans_act: Vec<T>,
    trans_bn: BnCache<T>,
    pool_arg: Vec<u8>,
}

impl<T> ForwardCache<T> {
    /// Normalised predictions, `batch × K`.
    pub fn predictions(&self) -> &[T] {
        &self.pred
    }
}

impl<T: Real> RegressorModel<T> {
    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    pub fn param_layout(&self) -> &[ParamEntry] {
        &self.layout.params
    }

    pub fn buffer_layout(&self) -> &[ParamEntry] {
        &self.layout.buffers
    }

    pub fn target_scale(&self) -> &[f64] {
        &self.target_scale
    }

    pub fn set_target_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != self.config.output_dim || scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "target scale needs {} positive values",
                self.config.output_dim
            )));
        }
        self.target_scale = scale;
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.config.input_dims[0] * self.config.input_dims[1]
    }

    fn check_batch(&self, images: &[T]) -> Result<usize> {
        let p = self.pixels();
        if images.is_empty() || !images.len().is_multiple_of(p) {
            return Err(Error::InvalidArgument(format!(
                "batch of {} values is not a whole number of {}×{} images",
                images.len(),
                self.config.input_dims[0],
                self.config.input_dims[1]
            )));
        }
        Ok(images.len() / p)
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    /// Linear head over pooled features: `batch × K`.
    fn head(&self, features: &[T], batch: usize) -> Vec<T> {
        let (f, k) = (self.layout.features, self.config.output_dim);
        let mut out = vec![T::zero(); batch * k];
        layers::gemm(false, true, batch, f, k, T::one(), features, self.p(&self.layout.linear_w), T::zero(), &mut out);
        let b = self.p(&self.layout.linear_b);
        for row in out.chunks_mut(k) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        out
    }

    fn global_pool(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
        let inv = T::one() / cast::<T>(hw as f64);
        (0..batch * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect()
    }

    /// Training-mode forward with batch statistics. Pure: running statistics
    /// are updated separately by [`RegressorModel::update_running_stats`].
    pub fn forward_train(&self, images: &[T]) -> Result<ForwardCache<T>> {
        let batch = self.check_batch(images)?;
        let s = self.layout.stem.shape;
        let mut x = vec![T::zero(); batch * s.cout * s.h * s.w];
        conv_forward(s, images, self.pixels(), self.p(&self.layout.stem.weight), &mut x, s.cout * s.h * s.w, 0);
        let mut x_stride = s.cout * s.h * s.w;
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let sh = b.shape;
            let hw = sh.width * sh.height;
            let stride = sh.block_out * hw;
            let mut buffer = vec![T::zero(); batch * stride];
            for n in 0..batch {
                buffer[n * stride..n * stride + sh.input_channels * hw]
                    .copy_from_slice(&x[n * x_stride..n * x_stride + sh.input_channels * hw]);
            }
            let mut lc = Vec::with_capacity(b.layers.len());
            for l in &b.layers {
                let (act, cache) =
                    bn_relu_train(&buffer, stride, batch, l.bn.c, hw, self.p(&l.bn.gamma), self.p(&l.bn.beta));
                conv_forward(l.conv.shape, &act, l.bn.c * hw, self.p(&l.conv.weight), &mut buffer, stride, l.bn.c * hw);
                lc.push((act, cache));
            }
            let (tact, tcache) = bn_relu_train(
                &buffer,
                stride,
                batch,
                sh.block_out,
                hw,
                self.p(&b.trans_bn.gamma),
                self.p(&b.trans_bn.beta),
            );
            let tc = b.trans_conv.shape;
            let mut tout = vec![T::zero(); batch * tc.cout * hw];
            conv_forward(tc, &tact, stride, self.p(&b.trans_conv.weight), &mut tout, tc.cout * hw, 0);
            let (pooled, arg) = maxpool_forward(&tout, batch, tc.cout, sh.height, sh.width);
            blocks.push(BlockCache {
                input_stride: x_stride,
                layers: lc,
                trans_act: tact,
                trans_bn: tcache,
                pool_arg: arg,
            });
            x = pooled;
            x_stride = tc.cout * hw / 4;
        }
        let last = self.layout.blocks.last().expect("≥ 1 block").shape;
        let features = Self::global_pool(&x, batch, self.layout.features, last.width * last.height / 4);
        let pred = self.head(&features, batch);
        Ok(ForwardCache {
            batch,
            input: images.to_vec(),
            blocks,
            features,
            pred,
        })
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let mom = cast::<T>(BN_MOMENTUM);
        let keep = T::one() - mom;
        let mut upd = |bn: &Bn, c: &BnCache<T>, count: usize| {
            let corr = if count > 1 {
                cast::<T>(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..bn.c {
                let m = &mut self.buffers[bn.mean.start + ch];
                *m = keep * *m + mom * c.mean[ch];
                let v = &mut self.buffers[bn.var.start + ch];
                *v = keep * *v + mom * c.var[ch] * corr;
            }
        };
        for (b, bc) in self.layout.blocks.iter().zip(&cache.blocks) {
            let count = cache.batch * b.shape.width * b.shape.height;
            for (l, (_, c)) in b.layers.iter().zip(&bc.layers) {
                upd(&l.bn, c, count);
            }
            upd(&b.trans_bn, &bc.trans_bn, count);
        }
    }

    /// Eval-mode forward: normalised outputs, `batch × K`. Never mutates.
    pub fn forward_eval(&self, images: &[T]) -> Result<Vec<T>> {
        let batch = self.check_batch(images)?;
        let s = self.layout.stem.shape;
        let mut x = vec![T::zero(); batch * s.cout * s.h * s.w];
        conv_forward(s, images, self.pixels(), self.p(&self.layout.stem.weight), &mut x, s.cout * s.h * s.w, 0);
        for b in &self.layout.blocks {
            let sh = b.shape;
            let hw = sh.width * sh.height;
            let stride = sh.block_out * hw;
            let mut buffer = vec![T::zero(); batch * stride];
            let cin = sh.input_channels * hw;
            for n in 0..batch {
                buffer[n * stride..n * stride + cin].copy_from_slice(&x[n * cin..(n + 1) * cin]);
            }
            let bufs = &self.buffers;
            for l in &b.layers {
                let act = bn_relu_eval(
                    &buffer,
                    stride,
                    batch,
                    l.bn.c,
                    hw,
                    self.p(&l.bn.gamma),
                    self.p(&l.bn.beta),
                    &bufs[l.bn.mean.clone()],
                    &bufs[l.bn.var.clone()],
                );
                conv_forward(l.conv.shape, &act, l.bn.c * hw, self.p(&l.conv.weight), &mut buffer, stride, l.bn.c * hw);
            }
            let tact = bn_relu_eval(
                &buffer,
                stride,
                batch,
                sh.block_out,
                hw,
                self.p(&b.trans_bn.gamma),
                self.p(&b.trans_bn.beta),
                &bufs[b.trans_bn.mean.clone()],
                &bufs[b.trans_bn.var.clone()],
            );
            let tc = b.trans_conv.shape;
            let mut tout = vec![T::zero(); batch * tc.cout * hw];
            conv_forward(tc, &tact, stride, self.p(&b.trans_conv.weight), &mut tout, tc.cout * hw, 0);
            x = maxpool_forward(&tout, batch, tc.cout, sh.height, sh.width).0;
        }
        let last = self.layout.blocks.last().expect("≥ 1 block").shape;
        let features = Self::global_pool(&x, batch, self.layout.features, last.width * last.height / 4);
        Ok(self.head(&features, batch))
    }

    /// Forward in the given mode. Eval returns raw weights (denormalised);
    /// train returns normalised outputs and updates the running statistics.
    pub fn forward(&mut self, images: &[T], mode: Mode) -> Result<Vec<T>> {
        match mode {
            Mode::Eval => {
                let mut out = self.forward_eval(images)?;
                self.denormalize(&mut out);
                Ok(out)
            }
            Mode::Train => {
                let cache = self.forward_train(images)?;
                self.update_running_stats(&cache);
                Ok(cache.pred)
            }
        }
    }

    fn denormalize(&self, out: &mut [T]) {
        let k = self.config.output_dim;
        for row in out.chunks_mut(k) {
            for (v, s) in row.iter_mut().zip(&self.target_scale) {
                *v = *v * cast::<T>(*s);
            }
        }
    }

    /// Gradient of `l1_loss(pred, targets)` for every parameter, in the flat
    /// layout. `targets` are normalised, `batch × K`.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: &[T]) -> Result<Vec<T>> {
        let batch = cache.batch;
        let k = self.config.output_dim;
        if targets.len() != batch * k {
            return Err(Error::InvalidArgument(format!(
                "expected {} targets, got {}",
                batch * k,
                targets.len()
            )));
        }
        let mut g = vec![T::zero(); self.layout.n_params];
        let inv = T::one() / cast::<T>((batch * k) as f64);
        let dpred: Vec<T> = cache
            .pred
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let d = p - t;
                if d > T::zero() {
                    inv
                } else if d < T::zero() {
                    -inv
                } else {
                    T::zero()
                }
            })
            .collect();
        // Linear head.
        let f = self.layout.features;
        layers::gemm(true, false, k, batch, f, T::one(), &dpred, &cache.features, T::zero(), &mut g[self.layout.linear_w.clone()]);
        for row in dpred.chunks(k) {
            for (gb, &d) in g[self.layout.linear_b.clone()].iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dfeat = vec![T::zero(); batch * f];
        layers::gemm(false, false, batch, k, f, T::one(), &dpred, self.p(&self.layout.linear_w), T::zero(), &mut dfeat);
        // Global average pool.
        let last = self.layout.blocks.last().expect("≥ 1 block").shape;
        let hw_last = last.width * last.height / 4;
        let inv_hw = T::one() / cast::<T>(hw_last as f64);
        let mut dx: Vec<T> = dfeat.iter().flat_map(|&d| std::iter::repeat_n(d * inv_hw, hw_last)).collect();

        for (b, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            let sh = b.shape;
            let hw = sh.width * sh.height;
            let stride = sh.block_out * hw;
            let tc = b.trans_conv.shape;
            let dtout = maxpool_backward(&dx, &bc.pool_arg, batch, tc.cout, sh.height, sh.width);
            let mut dtact = vec![T::zero(); batch * stride];
            let mut dw = vec![T::zero(); b.trans_conv.weight.len()];
            conv_backward(
                tc,
                batch,
                &bc.trans_act,
                stride,
                self.p(&b.trans_conv.weight),
                &dtout,
                tc.cout * hw,
                0,
                &mut dw,
                Some(&mut dtact),
            );
            add_into(&mut g[b.trans_conv.weight.clone()], &dw);
            let mut dbuf = vec![T::zero(); batch * stride];
            let (gg, gb) = two_ranges(&mut g, &b.trans_bn.gamma, &b.trans_bn.beta);
            bn_relu_backward(
                &dtact,
                &bc.trans_act,
                &bc.trans_bn,
                batch,
                sh.block_out,
                hw,
                self.p(&b.trans_bn.gamma),
                gg,
                gb,
                &mut dbuf,
                stride,
            );
            for (l, (act, bn)) in b.layers.iter().zip(&bc.layers).rev() {
                let cin = l.bn.c;
                let mut dact = vec![T::zero(); batch * cin * hw];
                let mut dw = vec![T::zero(); l.conv.weight.len()];
                conv_backward(
                    l.conv.shape,
                    batch,
                    act,
                    cin * hw,
                    self.p(&l.conv.weight),
                    &dbuf,
                    stride,
                    cin * hw,
                    &mut dw,
                    Some(&mut dact),
                );
                add_into(&mut g[l.conv.weight.clone()], &dw);
                let (gg, gb) = two_ranges(&mut g, &l.bn.gamma, &l.bn.beta);
                bn_relu_backward(&dact, act, bn, batch, cin, hw, self.p(&l.bn.gamma), gg, gb, &mut dbuf, stride);
            }
            let c0 = sh.input_channels * hw;
            dx = (0..batch)
                .flat_map(|n| dbuf[n * stride..n * stride + c0].iter().copied())
                .collect();
            debug_assert_eq!(bc.input_stride, c0);
        }
        let s = self.layout.stem.shape;
        let mut dw = vec![T::zero(); self.layout.stem.weight.len()];
        conv_backward(
            s,
            batch,
            &cache.input,
            self.pixels(),
            self.p(&self.layout.stem.weight),
            &dx,
            s.cout * s.h * s.w,
            0,
            &mut dw,
            None,
        );
        add_into(&mut g[self.layout.stem.weight.clone()], &dw);
        Ok(g)
    }

    /// Signs of every piecewise-linear decision of a training forward (ReLU
    /// gates, pooling winners, L1 residual signs). Two parameter settings
    /// with equal patterns lie on the same smooth piece of the loss.
    pub fn kink_pattern(&self, images: &[T], targets: &[T]) -> Result<Vec<u8>> {
        let cache = self.forward_train(images)?;
        let mut out = Vec::new();
        for bc in &cache.blocks {
            for (act, _) in &bc.layers {
                out.extend(act.iter().map(|&a| u8::from(a > T::zero())));
            }
            out.extend(bc.trans_act.iter().map(|&a| u8::from(a > T::zero())));
            out.extend_from_slice(&bc.pool_arg);
        }
        out.extend(cache.pred.iter().zip(targets).map(|(&p, &t)| u8::from(p > t) + 2 * u8::from(p < t)));
        Ok(out)
    }

    /// Raw weights for one image.
    pub fn infer(&self, image: &[T]) -> Result<Vec<f64>> {
        if image.len() != self.pixels() {
            return Err(Error::InvalidArgument(format!(
                "image has {} pixels, model expects {}",
                image.len(),
                self.pixels()
            )));
        }
        Ok(self.infer_batch(image)?.remove(0))
    }

    /// Raw weights for a batch of images laid end to end.
    pub fn infer_batch(&self, images: &[T]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.forward_eval(images)?;
        self.denormalize(&mut out);
        Ok(out
            .chunks(self.config.output_dim)
            .map(|r| r.iter().map(|v| v.to_f64().expect("finite")).collect())
            .collect())
    }

    /// SHA-256 over parameters and running statistics.
    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut bytes = Vec::with_capacity((self.params.len() + self.buffers.len()) * T::BYTES);
        for &v in self.params.iter().chain(&self.buffers) {
            v.write_le(&mut bytes);
        }
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Disjoint mutable views of two ranges (the first ends before the second).
fn two_ranges<'a, T>(v: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Throughput at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub batch_size: usize,
    pub repeats: usize,
    pub images_per_second: f64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    /// Coefficient of variation of the per-image latency across batches.
    pub per_image_cv: f64,
}

/// Times `repeats` eval-mode batches at each batch size, cycling through
/// `images` (laid end to end) to fill them. Untimed warm-up batches (at
/// least three, and at least 0.2 s) precede each size.
pub fn throughput_report<T: Real>(
    model: &RegressorModel<T>,
    images: &[T],
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<Vec<ThroughputRow>> {
    let n = model.check_batch(images)?;
    let p = model.pixels();
    if repeats < 2 {
        return Err(Error::InvalidArgument("throughput needs at least 2 repeats".into()));
    }
    batch_sizes
        .iter()
        .map(|&bs| {
            if bs == 0 {
                return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
            }
            let batch: Vec<T> = (0..bs).flat_map(|i| images[(i % n) * p..(i % n + 1) * p].iter().copied()).collect();
            let warm = Instant::now();
            for i in 0.. {
                if i >= 3 && warm.elapsed().as_secs_f64() >= 0.2 {
                    break;
                }
                std::hint::black_box(model.infer_batch(&batch)?);
            }
            let mut lat = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                std::hint::black_box(model.infer_batch(&batch)?);
                lat.push(t.elapsed().as_secs_f64());
            }
            let mean = lat.iter().sum::<f64>() / repeats as f64;
            let var = lat.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (repeats - 1) as f64;
            let std = var.sqrt();
            Ok(ThroughputRow {
                batch_size: bs,
                repeats,
                images_per_second: bs as f64 / mean,
                latency_mean_ms: mean * 1e3,
                latency_std_ms: std * 1e3,
                per_image_cv: if mean > 0.0 { std / mean } else { 0.0 },
            })
        })
        .collect()
}

pub fn write_throughput_csv(rows: &[ThroughputRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::fmt::Write as _;
    let path = path.as_ref();
    let mut s = String::from("batch_size,repeats,images_per_second,latency_mean_ms,latency_std_ms,per_image_cv\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.4},{:.4},{:.5}",
            r.batch_size, r.repeats, r.images_per_second, r.latency_mean_ms, r.latency_std_ms, r.per_image_cv
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Converts `f64` images to the network's scalar type.
pub fn to_real<T: Real>(values: &[f64]) -> Vec<T> {
    values.iter().map(|&v| cast(v)).collect()
}
