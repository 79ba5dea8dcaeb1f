//! Convolution → GPSA reparametrization and last-stage surgery.
//!
//! A k×k convolution becomes a GPSA layer with k² heads. Head `h = kr·k + kc`
//! is centred on offset `(kr − c, kc − c)`, `c = (k − 1)/2`, uses the identity
//! as its value map and the filter slice at pixel `(kr, kc)` as its output map.
//! With saturated α and λ every head attends one-hot to its offset and the
//! layer reproduces the convolution.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpsa::{alpha_raw_for, gpsa_forward_rows, sigmoid, GpsaConfig, GpsaLayer, GpsaParts, DEFAULT_BETA};
use crate::io::KvMap;
use crate::model::{ModelGraph, SpatialOp, SurgeryTag};
use crate::nn::{ConvLayer, Pad2D, Parameters};
use crate::tensor::ops;
use crate::tensor::{DType, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// α = 1, λ = 1.
    Paper,
    /// Saturated α and λ; exact equivalence.
    Strict,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Paper => "paper",
            InitKind::Strict => "strict",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(InitKind::Paper),
            "strict" => Ok(InitKind::Strict),
            _ => Err(Error::Config(format!("unknown init mode {s:?} (paper|strict)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitMode {
    pub kind: InitKind,
    pub alpha_init: f64,
    pub lambda_init: f64,
    /// Std of the initial query/key weights. 0 gives W_qry = W_key = 0.
    pub qk_std: f64,
    /// Seed for the query/key draw when `qk_std > 0`.
    pub seed: u64,
}

impl InitMode {
    pub fn paper() -> Self {
        InitMode { kind: InitKind::Paper, alpha_init: 1.0, lambda_init: 1.0, qk_std: 0.0, seed: 0 }
    }

    pub fn strict() -> Self {
        InitMode { kind: InitKind::Strict, alpha_init: 20.0, lambda_init: 20.0, qk_std: 0.0, seed: 0 }
    }

    /// Strict constants saturated to the working precision: 20 for f32, 40 for f64.
    pub fn strict_for(dtype: DType) -> Self {
        let sat = match dtype {
            DType::F32 => 20.0,
            DType::F64 => 40.0,
        };
        InitMode { alpha_init: sat, lambda_init: sat, ..Self::strict() }
    }

    pub fn strict_with(alpha: f64, lambda: f64) -> Result<Self> {
        let m = InitMode { alpha_init: alpha, lambda_init: lambda, ..Self::strict() };
        m.validate()?;
        Ok(m)
    }

    pub fn of_kind(kind: InitKind) -> Self {
        match kind {
            InitKind::Paper => Self::paper(),
            InitKind::Strict => Self::strict(),
        }
    }

    /// Any valid mode of this kind; for rebuilding a graph whose values are loaded afterwards.
    pub(crate) fn structural(kind: InitKind) -> Self {
        Self::of_kind(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_init > 0.0) || !self.lambda_init.is_finite() {
            return Err(Error::Config(format!("invalid init constants α={} λ={}", self.alpha_init, self.lambda_init)));
        }
        if !(self.qk_std >= 0.0) {
            return Err(Error::Config(format!("qk_std must be >= 0, got {}", self.qk_std)));
        }
        if self.kind == InitKind::Strict {
            if sigmoid(self.lambda_init) < 1.0 - 1e-6 {
                return Err(Error::Config(format!("strict mode needs σ(λ) ≥ 1 − 1e-6, λ = {}", self.lambda_init)));
            }
            if (-self.alpha_init).exp() > 1e-8 {
                return Err(Error::Config(format!("strict mode needs e^-α ≤ 1e-8, α = {}", self.alpha_init)));
            }
        }
        Ok(())
    }
}

/// Filter pixel `(row, col)` for head `h` of a k×k kernel. Row-major.
pub fn filter_pixel(head: usize, k: usize) -> (usize, usize) {
    (head / k, head % k)
}

/// The k² offsets of a k×k kernel in row-major pixel order.
pub fn head_centers(k: usize) -> Result<Vec<[i64; 2]>> {
    if k % 2 == 0 {
        return Err(Error::Unsupported(format!("kernel size {k} is not odd")));
    }
    let c = ((k - 1) / 2) as i64;
    Ok((0..k * k)
        .map(|h| {
            let (r, col) = filter_pixel(h, k);
            [r as i64 - c, col as i64 - c]
        })
        .collect())
}

/// GPSA layer computing the same map as `conv` (stride and padding excluded).
pub fn conv_to_gpsa<T: Element>(conv: &ConvLayer<T>, mode: &InitMode) -> Result<GpsaLayer<T>> {
    mode.validate()?;
    let shape = conv.filter.shape();
    let (d_out, d_in, k) = (shape[0], shape[1], shape[2]);
    if shape[3] != k {
        return Err(Error::Unsupported(format!("non-square kernel {}×{}", k, shape[3])));
    }
    let centers = head_centers(k)?;
    if d_out < d_in {
        log::warn!("conv_to_gpsa: D_out = {d_out} < D_in = {d_in}, per-head rank is bounded by D_out");
    }
    let nh = k * k;
    let mut config = GpsaConfig::new(nh, d_in, d_out);
    config.bias = conv.bias.is_some();
    let qk = config.qk_dim();

    let filter = conv.filter.data();
    let mut w_out = vec![T::zero(); nh * d_in * d_out];
    for h in 0..nh {
        let (kr, kc) = filter_pixel(h, k);
        for ci in 0..d_in {
            for co in 0..d_out {
                w_out[(h * d_in + ci) * d_out + co] = filter[((co * d_in + ci) * k + kr) * k + kc];
            }
        }
    }
    let mut w_val = vec![T::zero(); d_in * d_in];
    (0..d_in).for_each(|i| w_val[i * d_in + i] = T::one());
    let (w_qry, w_key) = if mode.qk_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mode.seed);
        (Tensor::randn(&[d_in, qk], mode.qk_std, &mut rng), Tensor::randn(&[d_in, qk], mode.qk_std, &mut rng))
    } else {
        (Tensor::zeros(&[d_in, qk]), Tensor::zeros(&[d_in, qk]))
    };
    let a_raw = alpha_raw_for(mode.alpha_init, DEFAULT_BETA)?;
    GpsaLayer::from_parts(
        config,
        GpsaParts {
            w_qry,
            w_key,
            w_val: Tensor::from_vec(w_val, &[d_in, d_in])?,
            w_out: Tensor::from_vec(w_out, &[nh, d_in, d_out])?,
            alpha_raw: Tensor::full(&[nh], T::c(a_raw)),
            centers: Tensor::from_vec(centers.iter().flat_map(|c| [T::c(c[0] as f64), T::c(c[1] as f64)]).collect(), &[nh, 2])?,
            gate: Tensor::full(&[nh], T::c(mode.lambda_init)),
            bias: conv.bias.as_ref().map(|b| b.detach()),
        },
    )
}

/// Spatial reduction applied after a GPSA layer that replaces a strided convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// Keep every `stride`-th pixel. Exact.
    Subsample,
    /// `stride`×`stride` average pool.
    AvgPool,
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsample::Subsample => "subsample",
            Downsample::AvgPool => "avgpool",
        })
    }
}

impl FromStr for Downsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subsample" => Ok(Downsample::Subsample),
            "avgpool" => Ok(Downsample::AvgPool),
            _ => Err(Error::Config(format!("unknown downsample {s:?} (subsample|avgpool)"))),
        }
    }
}

/// Pad → GPSA on the padded grid → crop → optional stride reduction.
#[derive(Clone, Debug)]
pub struct GpsaBlock<T: Element> {
    pub pad: Pad2D,
    pub layer: GpsaLayer<T>,
    /// Kernel size of the replaced convolution.
    pub kernel: usize,
    pub stride: usize,
    pub downsample: Downsample,
}

impl<T: Element> GpsaBlock<T> {
    pub fn from_conv(conv: &ConvLayer<T>, mode: &InitMode, downsample: Downsample) -> Result<Self> {
        Ok(GpsaBlock {
            pad: Pad2D { pad: conv.padding },
            layer: conv_to_gpsa(conv, mode)?,
            kernel: conv.kernel_size(),
            stride: conv.stride,
            downsample,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let padded = if self.pad.pad > 0 { self.pad.forward(x)? } else { x.clone() };
        let (hp, wp) = (padded.shape()[2], padded.shape()[3]);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::dim("gpsa_block", padded.shape(), &[self.kernel, self.kernel]));
        }
        let c = (self.kernel - 1) / 2;
        let (hc, wc) = (hp - (self.kernel - 1), wp - (self.kernel - 1));
        let step = match self.downsample {
            Downsample::Subsample => self.stride,
            Downsample::AvgPool => 1,
        };
        let (oh, ow) = ((hc - 1) / step + 1, (wc - 1) / step + 1);
        let rows: Vec<usize> = (0..oh)
            .flat_map(|r| (0..ow).map(move |col| (c + r * step) * wp + c + col * step))
            .collect();
        let tokens = ops::nchw_to_tokens(&padded)?;
        let y = gpsa_forward_rows(&tokens, &self.layer, hp, wp, Some(&rows))?;
        let y = ops::tokens_to_nchw(&y, oh, ow)?;
        match (self.stride, self.downsample) {
            (s, Downsample::AvgPool) if s > 1 => ops::avgpool2d(&y, s, s),
            _ => Ok(y),
        }
    }
}

/// Output agreement between two models on seeded random probes.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub n_probes: usize,
    pub resolution: usize,
    pub max_abs: f64,
    /// `max |a − b| / max |a|`, worst probe.
    pub max_rel: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplacedLayer {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub n_heads: usize,
    pub conv_params: usize,
    pub gpsa_params: usize,
}

impl ReplacedLayer {
    /// W_qry, W_key, W_val and the four per-head scalars (α̃, Δ₁, Δ₂, λ).
    pub fn closed_form_added(&self) -> usize {
        let qk = self.d_in.max(self.n_heads);
        2 * self.d_in * qk + self.d_in * self.d_in + 4 * self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryReport {
    pub mode: InitMode,
    pub downsample: Downsample,
    pub layers: Vec<ReplacedLayer>,
    pub params_before: usize,
    pub params_after: usize,
    pub equivalence: Vec<EquivalenceReport>,
}

impl SurgeryReport {
    pub fn added_params(&self) -> usize {
        self.params_after - self.params_before
    }

    pub fn closed_form_added(&self) -> usize {
        self.layers.iter().map(ReplacedLayer::closed_form_added).sum()
    }

    pub fn relative_increase(&self) -> f64 {
        self.added_params() as f64 / self.params_before as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "surgery: mode {} (alpha {}, lambda {}), downsample {}\n",
            self.mode.kind, self.mode.alpha_init, self.mode.lambda_init, self.downsample
        );
        s += &format!("replaced {} layer(s)\n", self.layers.len());
        for l in &self.layers {
            s += &format!(
                "  {}: {}x{} stride {}, {} -> {} channels, {} heads, {} -> {} params\n",
                l.name, l.kernel, l.kernel, l.stride, l.d_in, l.d_out, l.n_heads, l.conv_params, l.gpsa_params
            );
        }
        s += &format!(
            "params: {} -> {} (+{}, {:.2}%), closed form +{}\n",
            self.params_before,
            self.params_after,
            self.added_params(),
            100.0 * self.relative_increase(),
            self.closed_form_added()
        );
        for e in &self.equivalence {
            s += &format!(
                "equivalence @{}: {} probes, max abs {:.3e}, max rel {:.3e}, tol {:.1e}: {}\n",
                e.resolution,
                e.n_probes,
                e.max_abs,
                e.max_rel,
                e.tol,
                if e.passed { "pass" } else { "fail" }
            );
        }
        s
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mode", self.mode.kind)
            .set("alpha_init", self.mode.alpha_init)
            .set("lambda_init", self.mode.lambda_init)
            .set("qk_std", self.mode.qk_std)
            .set("downsample", self.downsample)
            .set("layers", self.layers.len())
            .set("params_before", self.params_before)
            .set("params_after", self.params_after)
            .set("params_added", self.added_params())
            .set("params_added_closed_form", self.closed_form_added())
            .set("relative_increase", self.relative_increase());
        for (i, l) in self.layers.iter().enumerate() {
            kv.set(&format!("layer{i}.name"), &l.name)
                .set(&format!("layer{i}.d_in"), l.d_in)
                .set(&format!("layer{i}.d_out"), l.d_out)
                .set(&format!("layer{i}.heads"), l.n_heads)
                .set(&format!("layer{i}.stride"), l.stride);
        }
        for (i, e) in self.equivalence.iter().enumerate() {
            kv.set(&format!("equivalence{i}.resolution"), e.resolution)
                .set(&format!("equivalence{i}.probes"), e.n_probes)
                .set(&format!("equivalence{i}.max_abs"), e.max_abs)
                .set(&format!("equivalence{i}.max_rel"), e.max_rel)
                .set(&format!("equivalence{i}.tol"), e.tol)
                .set(&format!("equivalence{i}.passed"), e.passed);
        }
        kv
    }
}

/// Replaces every 3×3 convolution of the last stage, subsampling after strided ones.
pub fn transform_last_stage<T: Element>(
    model: &ModelGraph<T>,
    mode: &InitMode,
) -> Result<(ModelGraph<T>, SurgeryReport)> {
    transform_last_stage_with(model, mode, Downsample::Subsample)
}

pub fn transform_last_stage_with<T: Element>(
    model: &ModelGraph<T>,
    mode: &InitMode,
    downsample: Downsample,
) -> Result<(ModelGraph<T>, SurgeryReport)> {
    mode.validate()?;
    if model.is_transformed() {
        return Err(Error::AlreadyTransformed("last stage already holds GPSA layers".into()));
    }
    let mut out = model.clone();
    let params_before = model.num_params();
    let mut layers = Vec::new();
    let s = out.stages.len() - 1;
    for (b, block) in out.stages[s].blocks.iter_mut().enumerate() {
        for (i, op) in block.convs.iter_mut().enumerate() {
            let conv = match op {
                SpatialOp::Conv(c) if c.kernel_size() == 3 => c.clone(),
                _ => continue,
            };
            let name = format!("stages.{s}.{b}.conv{i}");
            let layer_mode = InitMode { seed: mode.seed.wrapping_add(layers.len() as u64), ..*mode };
            let g = GpsaBlock::from_conv(&conv, &layer_mode, downsample)?;
            layers.push(ReplacedLayer {
                name,
                kernel: 3,
                stride: conv.stride,
                d_in: conv.in_channels(),
                d_out: conv.out_channels(),
                n_heads: g.layer.n_heads(),
                conv_params: conv.num_params(),
                gpsa_params: g.layer.num_params(),
            });
            *op = SpatialOp::Gpsa(g);
        }
    }
    if !layers.is_empty() {
        out.surgery = Some(SurgeryTag { kind: mode.kind, downsample });
    }
    let report = SurgeryReport {
        mode: *mode,
        downsample,
        layers,
        params_before,
        params_after: out.num_params(),
        equivalence: Vec::new(),
    };
    Ok((out, report))
}

/// Compares `a` and `b` in eval mode on `n_probes` seeded N(0, 1) images of side `resolution`.
pub fn verify_equivalence<T: Element>(
    a: &ModelGraph<T>,
    b: &ModelGraph<T>,
    n_probes: usize,
    tol: f64,
    resolution: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let (ca, cb) = (&a.config, &b.config);
    if ca.in_channels != cb.in_channels || ca.n_classes != cb.n_classes {
        return Err(Error::dim(
            "verify_equivalence",
            &[ca.in_channels, ca.n_classes],
            &[cb.in_channels, cb.n_classes],
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs, mut max_rel) = (0f64, 0f64);
    const CHUNK: usize = 25;
    let mut done = 0;
    while done < n_probes {
        let n = CHUNK.min(n_probes - done);
        let x = Tensor::<T>::randn(&[n, ca.in_channels, resolution, resolution], 1.0, &mut rng);
        let (ya, yb) = crate::tensor::no_grad(|| Ok::<_, Error>((a.forward_classify(&x)?, b.forward_classify(&x)?)))?;
        let classes = ca.n_classes;
        for (ra, rb) in ya.data().chunks(classes).zip(yb.data().chunks(classes)) {
            let dev = ra.iter().zip(rb).map(|(p, q)| (p.f64() - q.f64()).abs()).fold(0.0, f64::max);
            let scale = ra.iter().map(|p| p.f64().abs()).fold(0.0, f64::max);
            max_abs = max_abs.max(dev);
            max_rel = max_rel.max(if scale > 0.0 { dev / scale } else { dev });
        }
        done += n;
    }
    Ok(EquivalenceReport { n_probes, resolution, max_abs, max_rel, tol, passed: max_abs <= tol })
}
