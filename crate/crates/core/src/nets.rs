//! Networks: the encoder, the projection head producing unit-norm contrastive
//! embeddings, the binary (normal vs pseudo-anomaly) head, and the k-class
//! transform classifier used by the crafter.
//!
//! Forward passes are built on the [`crate::autodiff`] tape.  Parameters can
//! be bound as trainable leaves (training) or constants (attacks, inference),
//! and batch normalization can run on batch statistics (training) or running
//! statistics (evaluation).  Layer traversal order is fixed, so the `Vec` of
//! bound parameter nodes returned by a forward pass lines up with
//! [`Model::visit_params_mut`] — the optimizer relies on that alignment.

use crate::autodiff::{Graph, Var};
use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::stream_rng;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

const BN_EPS: f64 = 1e-5;

/// How parameters enter the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Gradients flow to parameters (training).
    Trainable,
    /// Parameters are constants (attacks, inference).
    Frozen,
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; the pass reports them for running-stat updates.
    Train,
    /// Running statistics; deterministic per sample.
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub index: usize,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Book-keeping shared by all layers during one forward pass.
pub struct ForwardCtx {
    bind: BindMode,
    norm: NormMode,
    params: Vec<Var>,
    bn_stats: Vec<BnStats>,
    bn_counter: usize,
}

impl ForwardCtx {
    fn new(bind: BindMode, norm: NormMode) -> Self {
        Self {
            bind,
            norm,
            params: Vec::new(),
            bn_stats: Vec::new(),
            bn_counter: 0,
        }
    }

    fn bind(&mut self, g: &mut Graph, value: &ArrayD<f64>) -> Var {
        let v = match self.bind {
            BindMode::Trainable => g.leaf(value.clone()),
            BindMode::Frozen => g.constant(value.clone()),
        };
        self.params.push(v);
        v
    }
}

// ---------------------------------------------------------------------------
// primitive layers
// ---------------------------------------------------------------------------

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

#[derive(Debug, Clone)]
struct Conv2dLayer {
    w: ArrayD<f64>, // [co, ci, k, k]
    b: ArrayD<f64>, // [co]
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    fn new(ci: usize, co: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he_normal(rng, &[co, ci, k, k], ci * k * k),
            b: ArrayD::zeros(IxDyn(&[co])),
            stride,
            pad,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let w = ctx.bind(g, &self.w);
        let b = ctx.bind(g, &self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.w = load_tensor(store, &format!("{prefix}.w"), self.w.shape())?;
        self.b = load_tensor(store, &format!("{prefix}.b"), self.b.shape())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BatchNormLayer {
    gamma: ArrayD<f64>,
    beta: ArrayD<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

impl BatchNormLayer {
    fn new(c: usize) -> Self {
        Self {
            gamma: ArrayD::ones(IxDyn(&[c])),
            beta: ArrayD::zeros(IxDyn(&[c])),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let gamma = ctx.bind(g, &self.gamma);
        let beta = ctx.bind(g, &self.beta);
        match ctx.norm {
            NormMode::Train => {
                let (y, mean, var) = g.batch_norm2d_train(x, gamma, beta, BN_EPS);
                ctx.bn_stats.push(BnStats {
                    index: ctx.bn_counter,
                    mean,
                    var,
                });
                ctx.bn_counter += 1;
                y
            }
            NormMode::Eval => {
                ctx.bn_counter += 1;
                g.batch_norm2d_eval(x, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        f(
            format!("{prefix}.running_mean"),
            &self.running_mean.clone().into_dyn(),
        );
        f(
            format!("{prefix}.running_var"),
            &self.running_var.clone().into_dyn(),
        );
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.gamma = load_tensor(store, &format!("{prefix}.gamma"), self.gamma.shape())?;
        self.beta = load_tensor(store, &format!("{prefix}.beta"), self.beta.shape())?;
        let rm = load_tensor(store, &format!("{prefix}.running_mean"), &[self.running_mean.len()])?;
        let rv = load_tensor(store, &format!("{prefix}.running_var"), &[self.running_var.len()])?;
        self.running_mean = rm.into_dimensionality().expect("rank-1 running mean");
        self.running_var = rv.into_dimensionality().expect("rank-1 running var");
        Ok(())
    }

    fn update_running(&mut self, stats: &BnStats, momentum: f64) {
        self.running_mean = &self.running_mean * (1.0 - momentum) + &stats.mean * momentum;
        self.running_var = &self.running_var * (1.0 - momentum) + &stats.var * momentum;
    }
}

#[derive(Debug, Clone)]
struct LinearLayer {
    w: ArrayD<f64>, // [in, out]
    b: ArrayD<f64>, // [out]
}

impl LinearLayer {
    fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he_normal(rng, &[input, output], input),
            b: ArrayD::zeros(IxDyn(&[output])),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let w = ctx.bind(g, &self.w);
        let b = ctx.bind(g, &self.b);
        let mm = g.matmul(x, w);
        g.add_rowvec(mm, b)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.w = load_tensor(store, &format!("{prefix}.w"), self.w.shape())?;
        self.b = load_tensor(store, &format!("{prefix}.b"), self.b.shape())?;
        Ok(())
    }
}

fn load_tensor(store: &TensorStore, name: &str, expect_shape: &[usize]) -> Result<ArrayD<f64>> {
    let t = store.get(name)?;
    if t.shape() != expect_shape {
        return Err(Error::CheckpointFormat(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            t.shape(),
            expect_shape
        )));
    }
    Ok(t.clone())
}

// ---------------------------------------------------------------------------
// encoders
// ---------------------------------------------------------------------------

/// Conv -> batch norm -> ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
}

impl ConvBlock {
    fn new(ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2dLayer::new(ci, co, 3, stride, 1, rng),
            bn: BatchNormLayer::new(co),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let c = self.conv.forward(g, x, ctx);
        let n = self.bn.forward(g, c, ctx);
        g.relu(n)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        self.conv.visit_trainable_mut(f);
        self.bn.visit_trainable_mut(f);
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.conv.load(&format!("{prefix}.conv"), store)?;
        self.bn.load(&format!("{prefix}.bn"), store)
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNormLayer)) {
        f(&mut self.bn);
    }
}

/// Stack of stride-2 conv blocks followed by global average pooling.
#[derive(Debug, Clone)]
struct SmallCnn {
    blocks: Vec<ConvBlock>,
}

impl SmallCnn {
    fn new(in_channels: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut ci = in_channels;
        for &co in widths {
            blocks.push(ConvBlock::new(ci, co, 2, rng));
            ci = co;
        }
        Self { blocks }
    }

    fn out_dim(&self) -> usize {
        self.blocks.last().map(|b| b.conv.w.shape()[0]).unwrap_or(0)
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut cur = x;
        for block in &self.blocks {
            cur = block.forward(g, cur, ctx);
        }
        g.global_avg_pool(cur)
    }
}

/// Two 3x3 convs with a residual connection (CIFAR-style, no initial
/// downsampling stem).
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2dLayer,
    bn1: BatchNormLayer,
    conv2: Conv2dLayer,
    bn2: BatchNormLayer,
    down: Option<(Conv2dLayer, BatchNormLayer)>,
}

impl BasicBlock {
    fn new(ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = if stride != 1 || ci != co {
            Some((
                Conv2dLayer::new(ci, co, 1, stride, 0, rng),
                BatchNormLayer::new(co),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2dLayer::new(ci, co, 3, stride, 1, rng),
            bn1: BatchNormLayer::new(co),
            conv2: Conv2dLayer::new(co, co, 3, 1, 1, rng),
            bn2: BatchNormLayer::new(co),
            down,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let c1 = self.conv1.forward(g, x, ctx);
        let n1 = self.bn1.forward(g, c1, ctx);
        let r1 = g.relu(n1);
        let c2 = self.conv2.forward(g, r1, ctx);
        let n2 = self.bn2.forward(g, c2, ctx);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let d = conv.forward(g, x, ctx);
                bn.forward(g, d, ctx)
            }
            None => x,
        };
        let sum = g.add(n2, skip);
        g.relu(sum)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &self.down {
            conv.visit(&format!("{prefix}.down.conv"), f);
            bn.visit(&format!("{prefix}.down.bn"), f);
        }
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        self.conv1.visit_trainable_mut(f);
        self.bn1.visit_trainable_mut(f);
        self.conv2.visit_trainable_mut(f);
        self.bn2.visit_trainable_mut(f);
        if let Some((conv, bn)) = &mut self.down {
            conv.visit_trainable_mut(f);
            bn.visit_trainable_mut(f);
        }
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.conv1.load(&format!("{prefix}.conv1"), store)?;
        self.bn1.load(&format!("{prefix}.bn1"), store)?;
        self.conv2.load(&format!("{prefix}.conv2"), store)?;
        self.bn2.load(&format!("{prefix}.bn2"), store)?;
        if let Some((conv, bn)) = &mut self.down {
            conv.load(&format!("{prefix}.down.conv"), store)?;
            bn.load(&format!("{prefix}.down.bn"), store)?;
        }
        Ok(())
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNormLayer)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        if let Some((_, bn)) = &mut self.down {
            f(bn);
        }
    }
}

#[derive(Debug, Clone)]
struct ResNet18 {
    stem: ConvBlock,
    blocks: Vec<BasicBlock>,
}

impl ResNet18 {
    fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBlock::new(in_channels, 64, 1, rng);
        let mut blocks = Vec::with_capacity(8);
        let widths = [64usize, 128, 256, 512];
        let mut ci = 64;
        for (stage, &co) in widths.iter().enumerate() {
            for block_i in 0..2 {
                let stride = if stage > 0 && block_i == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(ci, co, stride, rng));
                ci = co;
            }
        }
        Self { stem, blocks }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut cur = self.stem.forward(g, x, ctx);
        for block in &self.blocks {
            cur = block.forward(g, cur, ctx);
        }
        g.global_avg_pool(cur)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Small(SmallCnn),
    Resnet(ResNet18),
}

impl Encoder {
    fn out_dim(&self) -> usize {
        match self {
            Encoder::Small(net) => net.out_dim(),
            Encoder::Resnet(_) => 512,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        match self {
            Encoder::Small(net) => net.forward(g, x, ctx),
            Encoder::Resnet(net) => net.forward(g, x, ctx),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        match self {
            Encoder::Small(net) => {
                for (i, b) in net.blocks.iter().enumerate() {
                    b.visit(&format!("{prefix}.block{i}"), f);
                }
            }
            Encoder::Resnet(net) => {
                net.stem.visit(&format!("{prefix}.stem"), f);
                for (i, b) in net.blocks.iter().enumerate() {
                    b.visit(&format!("{prefix}.block{i}"), f);
                }
            }
        }
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        match self {
            Encoder::Small(net) => {
                for b in &mut net.blocks {
                    b.visit_trainable_mut(f);
                }
            }
            Encoder::Resnet(net) => {
                net.stem.visit_trainable_mut(f);
                for b in &mut net.blocks {
                    b.visit_trainable_mut(f);
                }
            }
        }
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        match self {
            Encoder::Small(net) => {
                for (i, b) in net.blocks.iter_mut().enumerate() {
                    b.load(&format!("{prefix}.block{i}"), store)?;
                }
            }
            Encoder::Resnet(net) => {
                net.stem.load(&format!("{prefix}.stem"), store)?;
                for (i, b) in net.blocks.iter_mut().enumerate() {
                    b.load(&format!("{prefix}.block{i}"), store)?;
                }
            }
        }
        Ok(())
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNormLayer)) {
        match self {
            Encoder::Small(net) => {
                for b in &mut net.blocks {
                    b.visit_bn_mut(f);
                }
            }
            Encoder::Resnet(net) => {
                net.stem.visit_bn_mut(f);
                for b in &mut net.blocks {
                    b.visit_bn_mut(f);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SmallCnn,
    Resnet18,
}

/// Architecture settings for the main model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub proj_dim: usize,
    pub proj_layers: usize,
    /// `(channels, height, width)` of the input images.
    pub input_shape: (usize, usize, usize),
    /// Channel widths of the small encoder (ignored by resnet18).
    pub small_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::SmallCnn,
            proj_dim: 128,
            proj_layers: 2,
            input_shape: (1, 28, 28),
            small_channels: vec![32, 64, 128, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim < 2 {
            return Err(Error::Config("model.proj_dim must be >= 2".into()));
        }
        if self.proj_layers < 1 {
            return Err(Error::Config("model.proj_layers must be >= 1".into()));
        }
        let (c, h, w) = self.input_shape;
        if c < 1 || h < 4 || w < 4 {
            return Err(Error::Config(format!(
                "model.input_shape ({c}, {h}, {w}) too small; need c >= 1 and h, w >= 4"
            )));
        }
        if self.encoder == EncoderKind::SmallCnn && self.small_channels.is_empty() {
            return Err(Error::Config("model.small_channels must be non-empty".into()));
        }
        Ok(())
    }
}

/// Multi-layer projection: linear (+ReLU) stack, final output L2-normalized
/// by the caller.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<LinearLayer>,
}

impl Mlp {
    fn new(input: usize, hidden: usize, output: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        if depth == 1 {
            layers.push(LinearLayer::new(input, output, rng));
        } else {
            layers.push(LinearLayer::new(input, hidden, rng));
            for _ in 1..depth - 1 {
                layers.push(LinearLayer::new(hidden, hidden, rng));
            }
            layers.push(LinearLayer::new(hidden, output, rng));
        }
        Self { layers }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(g, cur, ctx);
            if i + 1 < self.layers.len() {
                cur = g.relu(cur);
            }
        }
        cur
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.fc{i}"), f);
        }
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        for layer in &mut self.layers {
            layer.visit_trainable_mut(f);
        }
    }

    fn load(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.load(&format!("{prefix}.fc{i}"), store)?;
        }
        Ok(())
    }
}

/// Nodes produced by a model forward pass.
pub struct ForwardPass {
    /// Encoder features, `[n, enc_dim]`.
    pub h: Var,
    /// Unit-norm projected embeddings, `[n, proj_dim]`.
    pub z: Var,
    /// Binary-head logits, `[n, 2]`; column 1 is the anomaly class.
    pub logits: Var,
    /// Bound parameter nodes in traversal order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub bn_stats: Vec<BnStats>,
}

/// Plain-array outputs of an inference pass.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub h: Array2<f64>,
    pub z: Array2<f64>,
    /// Anomaly-class probability per sample.
    pub p_anom: Array1<f64>,
}

/// Encoder + projection head + binary head.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    encoder: Encoder,
    proj: Mlp,
    head: LinearLayer,
}

fn build_encoder(
    kind: EncoderKind,
    in_channels: usize,
    small_channels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Encoder {
    match kind {
        EncoderKind::SmallCnn => Encoder::Small(SmallCnn::new(in_channels, small_channels, rng)),
        EncoderKind::Resnet18 => Encoder::Resnet(ResNet18::new(in_channels, rng)),
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, "model_init", &[]);
        let encoder = build_encoder(cfg.encoder, cfg.input_shape.0, &cfg.small_channels, &mut rng);
        let enc_dim = encoder.out_dim();
        let proj = Mlp::new(enc_dim, enc_dim, cfg.proj_dim, cfg.proj_layers, &mut rng);
        let head = LinearLayer::new(enc_dim, 2, &mut rng);
        Ok(Self {
            cfg,
            encoder,
            proj,
            head,
        })
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let (_, c, h, w) = x.dims();
        if (c, h, w) != self.cfg.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input images are ({c}, {h}, {w}), model expects {:?}",
                self.cfg.input_shape
            )));
        }
        Ok(())
    }

    /// Build the forward graph for `x` (already a graph node).
    pub fn forward(&self, g: &mut Graph, x: Var, norm: NormMode, bind: BindMode) -> ForwardPass {
        let mut ctx = ForwardCtx::new(bind, norm);
        let h = self.encoder.forward(g, x, &mut ctx);
        let proj = self.proj.forward(g, h, &mut ctx);
        let z = g.l2_normalize_rows(proj);
        let logits = self.head.forward(g, h, &mut ctx);
        ForwardPass {
            h,
            z,
            logits,
            params: ctx.params,
            bn_stats: ctx.bn_stats,
        }
    }

    /// Inference on a batch: no gradients, running statistics.
    pub fn forward_eval(&self, x: &ImageBatch) -> Result<EvalOutput> {
        self.check_input(x)?;
        if x.is_empty() {
            return Err(Error::EmptyBatch("forward_eval".into()));
        }
        let mut g = Graph::new();
        let input = g.constant(x.array().clone().into_dyn());
        let pass = self.forward(&mut g, input, NormMode::Eval, BindMode::Frozen);
        let h = g
            .value(pass.h)
            .clone()
            .into_dimensionality()
            .expect("rank-2 features");
        let z = g
            .value(pass.z)
            .clone()
            .into_dimensionality()
            .expect("rank-2 embeddings");
        let logits: Array2<f64> = g
            .value(pass.logits)
            .clone()
            .into_dimensionality()
            .expect("rank-2 logits");
        let p_anom = softmax_col1(&logits);
        Ok(EvalOutput { h, z, p_anom })
    }

    /// Fold freshly observed batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnStats], momentum: f64) {
        let mut counter = 0usize;
        self.encoder.visit_bn_mut(&mut |bn| {
            if let Some(s) = stats.iter().find(|s| s.index == counter) {
                bn.update_running(s, momentum);
            }
            counter += 1;
        });
    }

    /// Visit every trainable parameter in the same order as the `params`
    /// list returned by [`Model::forward`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        self.encoder.visit_trainable_mut(f);
        self.proj.visit_trainable_mut(f);
        self.head.visit_trainable_mut(f);
    }

    /// Visit every persisted tensor (parameters and running statistics).
    pub fn visit_named(&self, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        self.encoder.visit("encoder", f);
        self.proj.visit("proj", f);
        self.head.visit("head", f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_named(&mut |_, t| n += t.len());
        n
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "model",
            "config": self.cfg,
            "extra": extra,
        });
        let mut store = TensorStore::new(meta);
        self.visit_named(&mut |name, t| store.insert(name, t.clone()));
        store.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let store = TensorStore::load(path)?;
        if store.meta["kind"] != "model" {
            return Err(Error::CheckpointFormat(format!(
                "expected a model checkpoint, found kind {}",
                store.meta["kind"]
            )));
        }
        let cfg: ModelConfig = serde_json::from_value(store.meta["config"].clone())
            .map_err(|e| Error::CheckpointFormat(format!("model config decode: {e}")))?;
        let mut model = Model::new(cfg, 0)?;
        model.encoder.load("encoder", &store)?;
        model.proj.load("proj", &store)?;
        model.head.load("head", &store)?;
        Ok((model, store.meta["extra"].clone()))
    }

    /// Write every persisted tensor under `prefix` into an open store, for
    /// composite checkpoints that carry more than the model.
    pub fn store_into(&self, store: &mut TensorStore, prefix: &str) {
        self.visit_named(&mut |name, t| store.insert(format!("{prefix}.{name}"), t.clone()));
    }

    /// Inverse of [`Model::store_into`].
    pub fn load_from(cfg: ModelConfig, store: &TensorStore, prefix: &str) -> Result<Self> {
        let mut model = Model::new(cfg, 0)?;
        model.encoder.load(&format!("{prefix}.encoder"), store)?;
        model.proj.load(&format!("{prefix}.proj"), store)?;
        model.head.load(&format!("{prefix}.head"), store)?;
        Ok(model)
    }
}

/// Numerically stable anomaly-class probability from `[n, 2]` logits.
pub fn softmax_col1(logits: &Array2<f64>) -> Array1<f64> {
    let n = logits.nrows();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let a = logits[[i, 0]];
        let b = logits[[i, 1]];
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        out[i] = eb / (ea + eb);
    }
    out
}

// ---------------------------------------------------------------------------
// transform classifier (used by the crafter)
// ---------------------------------------------------------------------------

/// Architecture settings for the k-class transform classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub encoder: EncoderKind,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub small_channels: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::SmallCnn,
            num_classes: 12,
            input_shape: (1, 28, 28),
            small_channels: vec![32, 64, 128, 256],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("classifier.num_classes must be >= 2".into()));
        }
        if self.encoder == EncoderKind::SmallCnn && self.small_channels.is_empty() {
            return Err(Error::Config(
                "classifier.small_channels must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Nodes produced by a classifier forward pass.
pub struct ClassifierPass {
    /// Penultimate (pooled) embeddings, `[n, enc_dim]`.
    pub embed: Var,
    /// Class logits, `[n, k]`.
    pub logits: Var,
    pub params: Vec<Var>,
    pub bn_stats: Vec<BnStats>,
}

/// Encoder + linear k-way head; penultimate activations double as the
/// embedding space for density modeling.
#[derive(Debug, Clone)]
pub struct TransformClassifier {
    pub cfg: ClassifierConfig,
    encoder: Encoder,
    head: LinearLayer,
}

impl TransformClassifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, "classifier_init", &[]);
        let encoder = build_encoder(cfg.encoder, cfg.input_shape.0, &cfg.small_channels, &mut rng);
        let head = LinearLayer::new(encoder.out_dim(), cfg.num_classes, &mut rng);
        Ok(Self { cfg, encoder, head })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, norm: NormMode, bind: BindMode) -> ClassifierPass {
        let mut ctx = ForwardCtx::new(bind, norm);
        let embed = self.encoder.forward(g, x, &mut ctx);
        let logits = self.head.forward(g, embed, &mut ctx);
        ClassifierPass {
            embed,
            logits,
            params: ctx.params,
            bn_stats: ctx.bn_stats,
        }
    }

    /// Inference: embeddings and logits as plain arrays.
    pub fn forward_eval(&self, x: &ImageBatch) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.is_empty() {
            return Err(Error::EmptyBatch("classifier forward_eval".into()));
        }
        let (_, c, h, w) = x.dims();
        if (c, h, w) != self.cfg.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input images are ({c}, {h}, {w}), classifier expects {:?}",
                self.cfg.input_shape
            )));
        }
        let mut g = Graph::new();
        let input = g.constant(x.array().clone().into_dyn());
        let pass = self.forward(&mut g, input, NormMode::Eval, BindMode::Frozen);
        let embed = g
            .value(pass.embed)
            .clone()
            .into_dimensionality()
            .expect("rank-2 embeddings");
        let logits = g
            .value(pass.logits)
            .clone()
            .into_dimensionality()
            .expect("rank-2 logits");
        Ok((embed, logits))
    }

    pub fn update_running_stats(&mut self, stats: &[BnStats], momentum: f64) {
        let mut counter = 0usize;
        self.encoder.visit_bn_mut(&mut |bn| {
            if let Some(s) = stats.iter().find(|s| s.index == counter) {
                bn.update_running(s, momentum);
            }
            counter += 1;
        });
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        self.encoder.visit_trainable_mut(f);
        self.head.visit_trainable_mut(f);
    }

    pub fn visit_named(&self, f: &mut dyn FnMut(String, &ArrayD<f64>)) {
        self.encoder.visit("encoder", f);
        self.head.visit("head", f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_named(&mut |_, t| n += t.len());
        n
    }

    /// Serialize into an existing tensor store under a name prefix (the
    /// threshold-model checkpoint embeds the classifier alongside the
    /// mixture parameters).
    pub fn store_into(&self, store: &mut TensorStore, prefix: &str) {
        self.visit_named(&mut |name, t| store.insert(format!("{prefix}.{name}"), t.clone()));
    }

    pub fn load_from(cfg: ClassifierConfig, store: &TensorStore, prefix: &str) -> Result<Self> {
        let mut net = TransformClassifier::new(cfg, 0)?;
        net.encoder.load(&format!("{prefix}.encoder"), store)?;
        net.head.load(&format!("{prefix}.head"), store)?;
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// Which update rule the optimizer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

/// Momentum optimizer over the parameters enumerated by a network's
/// `visit_params_mut`, in the same order as the `params` list of a forward
/// pass.
///
/// SGD:  `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
/// LARS: same, with the step scaled per tensor by the trust ratio
/// `η·‖p‖ / (‖g‖ + wd·‖p‖)`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARS trust coefficient η.
    pub trust_coef: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            weight_decay,
            trust_coef: 1e-3,
            velocity: Vec::new(),
        }
    }

    /// Apply one update.  `visit` must enumerate exactly the parameters
    /// whose gradients are in `grads`, in the same order.
    pub fn step(
        &mut self,
        grads: &[ArrayD<f64>],
        visit: impl FnOnce(&mut dyn FnMut(&mut ArrayD<f64>)),
    ) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        if self.velocity.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state holds {} tensors, step got {}",
                self.velocity.len(),
                grads.len()
            )));
        }
        let (kind, lr, mom, wd, eta) = (
            self.kind,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.trust_coef,
        );
        let velocity = &mut self.velocity;
        let mut k = 0usize;
        visit(&mut |p: &mut ArrayD<f64>| {
            assert!(
                k < grads.len(),
                "network exposes more parameters than the gradient list"
            );
            let g = &grads[k];
            assert_eq!(
                g.shape(),
                p.shape(),
                "gradient/parameter shape mismatch at tensor {k}"
            );
            let scale = match kind {
                OptimizerKind::SgdMomentum => 1.0,
                OptimizerKind::Lars => {
                    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = gn + wd * pn;
                    if pn > 0.0 && denom > 0.0 {
                        eta * pn / denom
                    } else {
                        1.0
                    }
                }
            };
            let v = &mut velocity[k];
            ndarray::Zip::from(&mut *v)
                .and(g)
                .and(&*p)
                .for_each(|vv, &gv, &pv| {
                    *vv = mom * *vv + scale * (gv + wd * pv);
                });
            ndarray::Zip::from(p).and(&*v).for_each(|pv, &vv| {
                *pv -= lr * vv;
            });
            k += 1;
        });
        if k != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "network exposed {k} parameters, gradient list has {}",
                grads.len()
            )));
        }
        Ok(())
    }

    /// Persist the momentum buffers (empty before the first step).
    pub fn store_into(&self, store: &mut TensorStore, prefix: &str) {
        store.insert(
            format!("{prefix}.count"),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), self.velocity.len() as f64),
        );
        for (i, v) in self.velocity.iter().enumerate() {
            store.insert(format!("{prefix}.{i}"), v.clone());
        }
    }

    /// Restore momentum buffers written by [`Optimizer::store_into`].
    pub fn load_from(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        let count = store.get(&format!("{prefix}.count"))?;
        let n = count.iter().next().copied().unwrap_or(0.0) as usize;
        let mut velocity = Vec::with_capacity(n);
        for i in 0..n {
            velocity.push(store.get(&format!("{prefix}.{i}"))?.clone());
        }
        self.velocity = velocity;
        Ok(())
    }
}

/// Materialize gradients for a forward pass's parameter nodes, zeros where
/// a parameter did not influence the objective.
pub fn gradient_arrays(
    graph: &Graph,
    grads: &crate::autodiff::Gradients,
    params: &[Var],
) -> Vec<ArrayD<f64>> {
    params
        .iter()
        .map(|&p| grads.get_or_zeros(p, graph.value(p).shape()))
        .collect()
}

/// Global L2 norm over a gradient list.
pub fn global_grad_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
