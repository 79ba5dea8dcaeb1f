//! Mini-ResNet builder and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpsa::GpsaLayer;
use crate::io::KvMap;
use crate::nn::{join, BatchNorm, ConvLayer, Linear, Parameters, StochasticDepth};
use crate::reparam::{Downsample, GpsaBlock, InitKind};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// 3×3 → 3×3.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a 4× narrower middle.
    Bottleneck,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            _ => Err(Error::Config(format!("unknown block kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Stride of the first block, 1 or 2.
    pub stride: usize,
    pub kind: BlockKind,
}

impl StageSpec {
    pub fn basic(blocks: usize, channels: usize, stride: usize) -> Self {
        StageSpec { blocks, channels, stride, kind: BlockKind::Basic }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 {
            return Err(Error::Config(format!("stage needs blocks and channels: {self:?}")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Config(format!("stage stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub n_classes: usize,
    pub stem_channels: usize,
    /// Nominal input side; the network accepts other sizes.
    pub resolution: usize,
    pub stages: Vec<StageSpec>,
    /// Stochastic depth rate, shared by every block.
    pub drop_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 stages of 2 basic blocks, 16 → 32 channels, 32×32 RGB, 10 classes.
    pub fn tiny() -> Self {
        ModelConfig {
            name: "tiny".into(),
            in_channels: 3,
            n_classes: 10,
            stem_channels: 16,
            resolution: 32,
            stages: vec![StageSpec::basic(2, 16, 1), StageSpec::basic(2, 32, 2)],
            drop_rate: 0.0,
            seed: 0,
        }
    }

    /// 3 stages of 2 basic blocks, 16 → 64 channels.
    pub fn small() -> Self {
        ModelConfig {
            name: "small".into(),
            stages: vec![StageSpec::basic(2, 16, 1), StageSpec::basic(2, 32, 2), StageSpec::basic(2, 64, 2)],
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.n_classes == 0 || self.stem_channels == 0 || self.resolution == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        StochasticDepth::new(self.drop_rate)?;
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.name", &self.name)
            .set("model.in_channels", self.in_channels)
            .set("model.n_classes", self.n_classes)
            .set("model.stem_channels", self.stem_channels)
            .set("model.resolution", self.resolution)
            .set("model.drop_rate", self.drop_rate)
            .set("model.seed", self.seed)
            .set("model.stages", self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            kv.set(&format!("model.stage{i}.blocks"), s.blocks)
                .set(&format!("model.stage{i}.channels"), s.channels)
                .set(&format!("model.stage{i}.stride"), s.stride)
                .set(&format!("model.stage{i}.kind"), s.kind);
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let m = kv.section("model");
        let n: usize = m.require("stages")?;
        let stages = (0..n)
            .map(|i| {
                let s = m.section(&format!("stage{i}"));
                Ok(StageSpec {
                    blocks: s.require("blocks")?,
                    channels: s.require("channels")?,
                    stride: s.require("stride")?,
                    kind: s.require("kind")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig {
            name: m.get_or("name", "custom".to_string())?,
            in_channels: m.require("in_channels")?,
            n_classes: m.require("n_classes")?,
            stem_channels: m.require("stem_channels")?,
            resolution: m.require("resolution")?,
            stages,
            drop_rate: m.get_or("drop_rate", 0.0)?,
            seed: m.get_or("seed", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Spatial mixing layer of a residual block: a convolution or its GPSA replacement.
#[derive(Clone, Debug)]
pub enum SpatialOp<T: Element> {
    Conv(ConvLayer<T>),
    Gpsa(GpsaBlock<T>),
}

impl<T: Element> SpatialOp<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SpatialOp::Conv(c) => c.forward(x),
            SpatialOp::Gpsa(g) => g.forward(x),
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer<T>> {
        match self {
            SpatialOp::Conv(c) => Some(c),
            SpatialOp::Gpsa(_) => None,
        }
    }

    pub fn as_gpsa(&self) -> Option<&GpsaBlock<T>> {
        match self {
            SpatialOp::Gpsa(g) => Some(g),
            SpatialOp::Conv(_) => None,
        }
    }
}

impl<T: Element> Parameters<T> for SpatialOp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            SpatialOp::Conv(c) => c.visit_params(prefix, f),
            SpatialOp::Gpsa(g) => g.layer.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            SpatialOp::Conv(c) => c.visit_params_mut(prefix, f),
            SpatialOp::Gpsa(g) => g.layer.visit_params_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Shortcut<T: Element> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Element> {
    pub kind: BlockKind,
    pub convs: Vec<SpatialOp<T>>,
    pub bns: Vec<BatchNorm<T>>,
    pub shortcut: Option<Shortcut<T>>,
    pub drop: StochasticDepth,
}

impl<T: Element> ResidualBlock<T> {
    fn build<R: RngCore>(
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        drop: StochasticDepth,
        rng: &mut R,
    ) -> Self {
        let convs = match kind {
            BlockKind::Basic => vec![
                ConvLayer::he_init(c_in, c_out, 3, stride, 1, rng),
                ConvLayer::he_init(c_out, c_out, 3, 1, 1, rng),
            ],
            BlockKind::Bottleneck => {
                let mid = (c_out / 4).max(1);
                vec![
                    ConvLayer::he_init(c_in, mid, 1, 1, 0, rng),
                    ConvLayer::he_init(mid, mid, 3, stride, 1, rng),
                    ConvLayer::he_init(mid, c_out, 1, 1, 0, rng),
                ]
            }
        };
        let bns = convs.iter().map(|c| BatchNorm::new(c.out_channels())).collect();
        let shortcut = (stride != 1 || c_in != c_out).then(|| Shortcut {
            conv: ConvLayer::he_init(c_in, c_out, 1, stride, 0, rng),
            bn: BatchNorm::new(c_out),
        });
        ResidualBlock { kind, convs: convs.into_iter().map(SpatialOp::Conv).collect(), bns, shortcut, drop }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        let n = self.convs.len();
        let mut h = x.clone();
        for (i, (op, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = bn.forward(&op.forward(&h)?, training)?;
            if i + 1 < n {
                h = ops::relu(&h);
            }
        }
        let branch = self.drop.apply(&h, training, rng)?;
        let skip = match &self.shortcut {
            Some(s) => s.bn.forward(&s.conv.forward(x)?, training)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&branch, &skip)?))
    }
}

impl<T: Element> Parameters<T> for ResidualBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, (op, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            op.visit_params(&join(prefix, &format!("conv{i}")), f);
            bn.visit_params(&join(prefix, &format!("bn{i}")), f);
        }
        if let Some(s) = &self.shortcut {
            s.conv.visit_params(&join(prefix, "shortcut.conv"), f);
            s.bn.visit_params(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, (op, bn)) in self.convs.iter_mut().zip(&mut self.bns).enumerate() {
            op.visit_params_mut(&join(prefix, &format!("conv{i}")), f);
            bn.visit_params_mut(&join(prefix, &format!("bn{i}")), f);
        }
        if let Some(s) = &mut self.shortcut {
            s.conv.visit_params_mut(&join(prefix, "shortcut.conv"), f);
            s.bn.visit_params_mut(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor<T>)) {
        for (i, bn) in self.bns.iter().enumerate() {
            bn.visit_buffers(&join(prefix, &format!("bn{i}")), f);
        }
        if let Some(s) = &self.shortcut {
            s.bn.visit_buffers(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn load_buffer(&self, name: &str, value: &Tensor<T>) -> Result<bool> {
        for (i, bn) in self.bns.iter().enumerate() {
            if let Some(rest) = name.strip_prefix(&format!("bn{i}.")) {
                return bn.load_buffer(rest, value);
            }
        }
        match (&self.shortcut, name.strip_prefix("shortcut.bn.")) {
            (Some(s), Some(rest)) => s.bn.load_buffer(rest, value),
            _ => Ok(false),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T: Element> {
    pub blocks: Vec<ResidualBlock<T>>,
}

/// Which surgery, if any, produced this graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurgeryTag {
    pub kind: InitKind,
    pub downsample: Downsample,
}

/// Input of one GPSA layer, see [`ModelGraph::gpsa_inputs`].
#[derive(Clone, Debug)]
pub struct GpsaInput<T: Element> {
    pub name: String,
    pub tokens: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub pad: usize,
}

/// Stem → residual stages → global average pool → linear classifier.
///
/// Stem: 3×3 stride-2 conv, BatchNorm, ReLU, 2×2 average pool.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Element> {
    pub config: ModelConfig,
    pub stem_conv: ConvLayer<T>,
    pub stem_bn: BatchNorm<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
    pub training: bool,
    pub surgery: Option<SurgeryTag>,
}

/// Seeded He-initialized CNN.
pub fn build_cnn<T: Element>(config: &ModelConfig) -> Result<ModelGraph<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let drop = StochasticDepth::new(config.drop_rate)?;
    let stem_conv = ConvLayer::he_init(config.in_channels, config.stem_channels, 3, 2, 1, &mut rng);
    let stem_bn = BatchNorm::new(config.stem_channels);
    let mut c_in = config.stem_channels;
    let mut stages = Vec::with_capacity(config.stages.len());
    for spec in &config.stages {
        let blocks = (0..spec.blocks)
            .map(|b| {
                let stride = if b == 0 { spec.stride } else { 1 };
                let block = ResidualBlock::build(spec.kind, c_in, spec.channels, stride, drop, &mut rng);
                c_in = spec.channels;
                block
            })
            .collect();
        stages.push(Stage { blocks });
    }
    let head = Linear::init(c_in, config.n_classes, &mut rng);
    Ok(ModelGraph { config: config.clone(), stem_conv, stem_bn, stages, head, training: false, surgery: None })
}

impl<T: Element> ModelGraph<T> {
    pub fn train_mode(&mut self, training: bool) -> &mut Self {
        self.training = training;
        self
    }

    /// Forward pass in the graph's own mode.
    pub fn forward(&self, x: &Tensor<T>, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        self.forward_mode(x, self.training, rng)
    }

    pub fn forward_mode(&self, x: &Tensor<T>, training: bool, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.config.in_channels {
            return Err(Error::dim("forward_classify", x.shape(), &[0, self.config.in_channels, 0, 0]));
        }
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(x)?, training)?;
        h = ops::avgpool2d(&ops::relu(&h), 2, 2)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h, training, rng)?;
            }
        }
        self.head.forward(&ops::global_avg_pool(&h)?)
    }

    /// Logits in eval mode: deterministic, running BatchNorm statistics.
    pub fn forward_classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        // Eval mode never draws from the generator.
        self.forward_mode(x, false, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_buffers("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params("", &mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Replaces a parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut result = Err(Error::Usage(format!("no parameter named {name}")));
        let mut value = Some(value);
        self.visit_params_mut("", &mut |n, t| {
            if n == name {
                let v = value.take().expect("names are unique");
                result = if v.shape() == t.shape() {
                    *t = v.detach().requires_grad_();
                    Ok(())
                } else {
                    Err(Error::dim("set_param", t.shape(), v.shape()))
                };
            }
        });
        result
    }

    pub fn set_buffer(&self, name: &str, value: &Tensor<T>) -> Result<()> {
        if self.load_buffer(name, value)? {
            Ok(())
        } else {
            Err(Error::Usage(format!("no buffer named {name}")))
        }
    }

    pub fn zero_grad(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }

    /// GPSA layers in forward order, with their parameter prefixes.
    pub fn gpsa_layers(&self) -> Vec<(String, &GpsaLayer<T>)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                for (i, op) in block.convs.iter().enumerate() {
                    if let Some(g) = op.as_gpsa() {
                        out.push((format!("stages.{s}.{b}.conv{i}"), &g.layer));
                    }
                }
            }
        }
        out
    }

    /// Eval-mode inputs of every GPSA layer for the images in `x`, padded and
    /// laid out as B×L×D_in tokens, with the padded grid size and the padding.
    pub fn gpsa_inputs(&self, x: &Tensor<T>) -> Result<Vec<GpsaInput<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::new();
        crate::tensor::no_grad(|| {
            let mut h = self.stem_bn.forward(&self.stem_conv.forward(x)?, false)?;
            h = ops::avgpool2d(&ops::relu(&h), 2, 2)?;
            for (s, stage) in self.stages.iter().enumerate() {
                for (b, block) in stage.blocks.iter().enumerate() {
                    let n = block.convs.len();
                    let mut a = h.clone();
                    for (i, (op, bn)) in block.convs.iter().zip(&block.bns).enumerate() {
                        if let Some(g) = op.as_gpsa() {
                            let padded = if g.pad.pad > 0 { g.pad.forward(&a)? } else { a.clone() };
                            let (hp, wp) = (padded.shape()[2], padded.shape()[3]);
                            out.push(GpsaInput {
                                name: format!("stages.{s}.{b}.conv{i}"),
                                tokens: ops::nchw_to_tokens(&padded)?,
                                height: hp,
                                width: wp,
                                pad: g.pad.pad,
                            });
                        }
                        a = bn.forward(&op.forward(&a)?, false)?;
                        if i + 1 < n {
                            a = ops::relu(&a);
                        }
                    }
                    h = block.forward(&h, false, &mut rng)?;
                }
            }
            Ok::<_, Error>(())
        })?;
        Ok(out)
    }

    /// Sets the stochastic depth rate of every residual block.
    pub fn set_drop_rate(&mut self, rate: f64) -> Result<()> {
        let drop = StochasticDepth::new(rate)?;
        self.config.drop_rate = rate;
        self.stages.iter_mut().flat_map(|s| &mut s.blocks).for_each(|b| b.drop = drop);
        Ok(())
    }

    pub fn is_transformed(&self) -> bool {
        self.stages.iter().flat_map(|s| &s.blocks).flat_map(|b| &b.convs).any(|op| op.as_gpsa().is_some())
    }

    /// Same graph with every tensor converted to `U`.
    pub fn cast<U: Element>(&self) -> Result<ModelGraph<U>> {
        let mut out: ModelGraph<U> = build_cnn(&self.config)?;
        if let Some(tag) = self.surgery {
            let mode = crate::reparam::InitMode::structural(tag.kind);
            out = crate::reparam::transform_last_stage_with(&out, &mode, tag.downsample)?.0;
        }
        for (name, t) in self.named_params() {
            out.set_param(&name, t.cast())?;
        }
        for (name, t) in self.named_buffers() {
            out.set_buffer(&name, &t.cast())?;
        }
        out.training = self.training;
        Ok(out)
    }
}

impl<T: Element> Parameters<T> for ModelGraph<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem_conv.visit_params(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_params(&join(prefix, "stem.bn"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                block.visit_params(&join(prefix, &format!("stages.{s}.{b}")), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem_conv.visit_params_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_params_mut(&join(prefix, "stem.bn"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&join(prefix, &format!("stages.{s}.{b}")), f);
            }
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor<T>)) {
        self.stem_bn.visit_buffers(&join(prefix, "stem.bn"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                block.visit_buffers(&join(prefix, &format!("stages.{s}.{b}")), f);
            }
        }
    }

    fn load_buffer(&self, name: &str, value: &Tensor<T>) -> Result<bool> {
        if let Some(rest) = name.strip_prefix("stem.bn.") {
            return self.stem_bn.load_buffer(rest, value);
        }
        let Some(rest) = name.strip_prefix("stages.") else {
            return Ok(false);
        };
        let mut parts = rest.splitn(3, '.');
        let (Some(s), Some(b), Some(tail)) = (parts.next(), parts.next(), parts.next()) else {
            return Ok(false);
        };
        let (Ok(s), Ok(b)) = (s.parse::<usize>(), b.parse::<usize>()) else {
            return Ok(false);
        };
        match self.stages.get(s).and_then(|st| st.blocks.get(b)) {
            Some(block) => block.load_buffer(tail, value),
            None => Ok(false),
        }
    }
}

/// Mean cross-entropy of `logits` (B×classes) against `labels`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    ops::cross_entropy(logits, labels)
}

/// Number of rows whose argmax equals the label.
pub fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            best == y
        })
        .count()
}
