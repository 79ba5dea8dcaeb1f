//! Gated positional self-attention.
//!
//! Each head mixes a content softmax over `Q Kᵀ` with a positional softmax
//! over fixed relative encodings, weighted by `σ(λ_h)`:
//!
//! ```text
//! A_h = (1 − σ(λ_h)) · softmax(Q_h K_hᵀ) + σ(λ_h) · softmax(−α_h (‖δ‖² − 2 Δ_h·δ))
//! out = Σ_h A_h X W_val W_out^h (+ bias)
//! ```
//!
//! where `δ = pos(key) − pos(query)` in (row, col) pixel units and
//! `α_h = softplus_β(α̃_h)` keeps the locality strength positive.

mod attention;
mod export;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Parameters};
use crate::tensor::ops::sigmoid_f64;
use crate::tensor::{Element, Tensor};

pub use attention::{gated_attention, gpsa_forward, gpsa_forward_nchw, gpsa_forward_rows};
pub use export::{export_attention_maps, query_attention_maps, AttentionMap};

/// Softplus sharpness for the locality-strength rectifier.
pub const DEFAULT_BETA: f64 = 5.0;

/// Locality strength `α = (1/β) ln(1 + e^{β α̃})`, strictly positive and
/// increasing in `alpha_raw`.
pub fn alpha_of(alpha_raw: f64, beta: f64) -> f64 {
    let z = beta * alpha_raw;
    let v = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    v / beta
}

/// Inverse of [`alpha_of`]: the raw parameter giving locality strength `alpha`.
pub fn alpha_raw_for(alpha: f64, beta: f64) -> Result<f64> {
    if alpha <= 0.0 || beta <= 0.0 || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be > 0 and beta > 0, got {alpha}, {beta}")));
    }
    // (1/β) ln(e^{βα} − 1), written to avoid overflow for large βα.
    Ok(alpha + (-(-beta * alpha).exp()).ln_1p() / beta)
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_f64(x)
}

/// Positional attention logits for one grid, all heads.
#[derive(Clone, Debug)]
pub struct PositionalLogits<T: Element> {
    pub height: usize,
    pub width: usize,
    pub n_heads: usize,
    /// `n_heads × L × L`, row = query pixel, column = key pixel.
    pub logits: Vec<T>,
}

impl<T: Element> PositionalLogits<T> {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self, h: usize) -> &[T] {
        let l2 = self.len() * self.len();
        &self.logits[h * l2..(h + 1) * l2]
    }

    pub fn at(&self, h: usize, query: usize, key: usize) -> T {
        self.head(h)[query * self.len() + key]
    }
}

/// Relative offsets `pos(j) − pos(i)` for every query/key pair, row-major.
pub(crate) fn offsets(height: usize, width: usize) -> Vec<[f64; 2]> {
    let l = height * width;
    let mut out = Vec::with_capacity(l * l);
    for i in 0..l {
        let (ri, ci) = ((i / width) as f64, (i % width) as f64);
        for j in 0..l {
            out.push([(j / width) as f64 - ri, (j % width) as f64 - ci]);
        }
    }
    out
}

/// `−α (‖δ‖² − 2 Δ·δ)`.
#[inline]
pub fn positional_logit(alpha: f64, center: [f64; 2], delta: [f64; 2]) -> f64 {
    let sq = delta[0] * delta[0] + delta[1] * delta[1];
    -alpha * (sq - 2.0 * center[0] * delta[0] - 2.0 * center[1] * delta[1])
}

pub fn positional_logits<T: Element>(
    height: usize,
    width: usize,
    alphas: &[f64],
    centers: &[[f64; 2]],
) -> Result<PositionalLogits<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("positional grid must be at least 1×1".into()));
    }
    if alphas.len() != centers.len() {
        return Err(Error::dim("positional_logits", &[alphas.len()], &[centers.len()]));
    }
    let deltas = offsets(height, width);
    let mut logits = Vec::with_capacity(alphas.len() * deltas.len());
    for (&a, &c) in alphas.iter().zip(centers) {
        logits.extend(deltas.iter().map(|&d| T::c(positional_logit(a, c, d))));
    }
    Ok(PositionalLogits { height, width, n_heads: alphas.len(), logits })
}

/// Column range of the query/key projections owned by `head`.
pub(crate) fn head_split(qk_dim: usize, n_heads: usize, head: usize) -> (usize, usize) {
    let start = head * qk_dim / n_heads;
    let end = (head + 1) * qk_dim / n_heads;
    (start, end - start)
}

/// Shape hyperparameters of a [`GpsaLayer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsaConfig {
    pub n_heads: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Apply `1/√D_h` to content logits.
    pub content_scale: bool,
    pub beta: f64,
    pub bias: bool,
}

impl GpsaConfig {
    pub fn new(n_heads: usize, d_in: usize, d_out: usize) -> Self {
        GpsaConfig { n_heads, d_in, d_out, content_scale: true, beta: DEFAULT_BETA, bias: false }
    }

    /// Total query/key width; heads split it as evenly as possible.
    pub fn qk_dim(&self) -> usize {
        self.d_in.max(self.n_heads)
    }

    /// Value width, equal to the input width.
    pub fn d_v(&self) -> usize {
        self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config(format!("GPSA dimensions must be positive: {self:?}")));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("softplus beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

type CacheKey = (usize, usize, u64, u64);

/// One GPSA layer. `w_val` is a single matrix shared by every head.
#[derive(Debug)]
pub struct GpsaLayer<T: Element> {
    pub config: GpsaConfig,
    /// D_in × qk_dim.
    pub w_qry: Tensor<T>,
    /// D_in × qk_dim.
    pub w_key: Tensor<T>,
    /// D_in × D_in.
    pub w_val: Tensor<T>,
    /// N_h × D_in × D_out.
    pub w_out: Tensor<T>,
    /// N_h.
    pub alpha_raw: Tensor<T>,
    /// N_h × 2, (row, col) offsets.
    pub centers: Tensor<T>,
    /// N_h.
    pub gate: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    cache: Mutex<HashMap<CacheKey, Arc<PositionalLogits<T>>>>,
}

impl<T: Element> Clone for GpsaLayer<T> {
    fn clone(&self) -> Self {
        GpsaLayer {
            config: self.config,
            w_qry: self.w_qry.clone(),
            w_key: self.w_key.clone(),
            w_val: self.w_val.clone(),
            w_out: self.w_out.clone(),
            alpha_raw: self.alpha_raw.clone(),
            centers: self.centers.clone(),
            gate: self.gate.clone(),
            bias: self.bias.clone(),
            cache: Mutex::new(HashMap::new()),
        }
    }
}

/// Explicit parameter values for [`GpsaLayer::from_parts`].
pub struct GpsaParts<T: Element> {
    pub w_qry: Tensor<T>,
    pub w_key: Tensor<T>,
    pub w_val: Tensor<T>,
    pub w_out: Tensor<T>,
    pub alpha_raw: Tensor<T>,
    pub centers: Tensor<T>,
    pub gate: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> GpsaLayer<T> {
    pub fn from_parts(config: GpsaConfig, parts: GpsaParts<T>) -> Result<Self> {
        config.validate()?;
        let (nh, di, dout, qk) = (config.n_heads, config.d_in, config.d_out, config.qk_dim());
        let expect = |t: &Tensor<T>, shape: &[usize], what: &'static str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::dim(what, t.shape(), shape))
            }
        };
        expect(&parts.w_qry, &[di, qk], "gpsa w_qry")?;
        expect(&parts.w_key, &[di, qk], "gpsa w_key")?;
        expect(&parts.w_val, &[di, di], "gpsa w_val")?;
        expect(&parts.w_out, &[nh, di, dout], "gpsa w_out")?;
        expect(&parts.alpha_raw, &[nh], "gpsa alpha_raw")?;
        expect(&parts.centers, &[nh, 2], "gpsa centers")?;
        expect(&parts.gate, &[nh], "gpsa gate")?;
        if config.bias != parts.bias.is_some() {
            return Err(Error::Config("bias presence disagrees with GPSA config".into()));
        }
        if let Some(b) = &parts.bias {
            expect(b, &[dout], "gpsa bias")?;
        }
        Ok(GpsaLayer {
            config,
            w_qry: parts.w_qry.requires_grad_(),
            w_key: parts.w_key.requires_grad_(),
            w_val: parts.w_val.requires_grad_(),
            w_out: parts.w_out.requires_grad_(),
            alpha_raw: parts.alpha_raw.requires_grad_(),
            centers: parts.centers.requires_grad_(),
            gate: parts.gate.requires_grad_(),
            bias: parts.bias.map(Tensor::requires_grad_),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Random content projections, identity values, random output maps,
    /// centers on a small grid, α = 1 and λ = 0.
    pub fn random<R: Rng + ?Sized>(config: GpsaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (nh, di, dout, qk) = (config.n_heads, config.d_in, config.d_out, config.qk_dim());
        let side = (nh as f64).sqrt().ceil() as usize;
        let centers = (0..nh)
            .flat_map(|h| {
                let (r, c) = ((h / side) as f64, (h % side) as f64);
                let mid = (side as f64 - 1.0) / 2.0;
                [T::c(r - mid), T::c(c - mid)]
            })
            .collect();
        let a_raw = alpha_raw_for(1.0, config.beta)?;
        Self::from_parts(
            config,
            GpsaParts {
                w_qry: Tensor::randn(&[di, qk], 1.0 / (di as f64).sqrt(), rng),
                w_key: Tensor::randn(&[di, qk], 1.0 / (di as f64).sqrt(), rng),
                w_val: Tensor::randn(&[di, di], 1.0 / (di as f64).sqrt(), rng),
                w_out: Tensor::randn(&[nh, di, dout], 1.0 / ((nh * di) as f64).sqrt(), rng),
                alpha_raw: Tensor::full(&[nh], T::c(a_raw)),
                centers: Tensor::from_vec(centers, &[nh, 2])?,
                gate: Tensor::zeros(&[nh]),
                bias: config.bias.then(|| Tensor::zeros(&[dout])),
            },
        )
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_raw.data().iter().map(|a| alpha_of(a.f64(), self.config.beta)).collect()
    }

    pub fn center_values(&self) -> Vec<[f64; 2]> {
        self.centers.data().chunks(2).map(|c| [c[0].f64(), c[1].f64()]).collect()
    }

    /// Receptive-field proxy `1/α_h` per head.
    pub fn attention_span(&self) -> Vec<f64> {
        self.alphas().iter().map(|a| 1.0 / a).collect()
    }

    /// Positional weight `σ(λ_h)` per head.
    pub fn gating_values(&self) -> Vec<f64> {
        self.gate.data().iter().map(|g| sigmoid(g.f64())).collect()
    }

    /// Positional logits for an `height`×`width` grid, cached per resolution
    /// until α̃ or Δ are replaced.
    pub fn positional_logits(&self, height: usize, width: usize) -> Result<Arc<PositionalLogits<T>>> {
        let key = (height, width, self.alpha_raw.id(), self.centers.id());
        let mut cache = self.cache.lock().expect("gpsa cache lock");
        if let Some(hit) = cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        cache.retain(|k, _| k.2 == key.2 && k.3 == key.3);
        let pl = Arc::new(positional_logits(height, width, &self.alphas(), &self.center_values())?);
        cache.insert(key, Arc::clone(&pl));
        Ok(pl)
    }

    /// Number of resolutions currently cached.
    pub fn cached_resolutions(&self) -> usize {
        self.cache.lock().expect("gpsa cache lock").len()
    }
}

impl<T: Element> Parameters<T> for GpsaLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "w_qry"), &self.w_qry);
        f(join(prefix, "w_key"), &self.w_key);
        f(join(prefix, "w_val"), &self.w_val);
        f(join(prefix, "w_out"), &self.w_out);
        f(join(prefix, "alpha_raw"), &self.alpha_raw);
        f(join(prefix, "centers"), &self.centers);
        f(join(prefix, "gate"), &self.gate);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w_qry"), &mut self.w_qry);
        f(join(prefix, "w_key"), &mut self.w_key);
        f(join(prefix, "w_val"), &mut self.w_val);
        f(join(prefix, "w_out"), &mut self.w_out);
        f(join(prefix, "alpha_raw"), &mut self.alpha_raw);
        f(join(prefix, "centers"), &mut self.centers);
        f(join(prefix, "gate"), &mut self.gate);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Parameter-name suffixes of the per-head GPSA scalars.
pub const SCALAR_PARAM_SUFFIXES: [&str; 3] = ["alpha_raw", "centers", "gate"];

pub fn is_gate_param(name: &str) -> bool {
    name.ends_with(".gate") || name == "gate"
}

pub fn is_gpsa_scalar_param(name: &str) -> bool {
    SCALAR_PARAM_SUFFIXES
        .iter()
        .any(|s| name == *s || name.ends_with(&format!(".{s}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_examples() {
        assert!((alpha_of(0.0, 5.0) - 2f64.ln() / 5.0).abs() < 1e-15);
        assert!((alpha_of(0.0, 5.0) - 0.1386).abs() < 1e-4);
        assert!(alpha_of(-100.0, 5.0) > 0.0);
        let raw = alpha_raw_for(1.0, 5.0).unwrap();
        assert!((raw - (5f64.exp() - 1.0).ln() / 5.0).abs() < 1e-14);
        assert!((raw - 0.998_648).abs() < 1e-6);
        assert!((alpha_of(raw, 5.0) - 1.0).abs() < 1e-14);
        let big = alpha_raw_for(20.0, 5.0).unwrap();
        assert!((alpha_of(big, 5.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_is_increasing() {
        let xs: Vec<f64> = (-40..40).map(|i| i as f64 * 0.25).collect();
        for w in xs.windows(2) {
            assert!(alpha_of(w[1], 5.0) > alpha_of(w[0], 5.0));
        }
    }

    #[test]
    fn positional_logit_examples() {
        assert_eq!(positional_logit(1.3, [0.0, 0.0], [0.0, 0.0]), 0.0);
        assert_eq!(positional_logit(2.0, [1.0, 1.0], [1.0, 1.0]), 4.0);
        assert_eq!(positional_logit(2.0, [1.0, 1.0], [0.0, 0.0]), 0.0);
        assert_eq!(positional_logit(2.0, [1.0, 1.0], [-1.0, -1.0]), -12.0);
    }

    #[test]
    fn logits_match_completed_square() {
        let pl = positional_logits::<f64>(4, 5, &[0.7], &[[0.5, -1.25]]).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let d = [(j / 5) as f64 - (i / 5) as f64, (j % 5) as f64 - (i % 5) as f64];
                let c = [0.5, -1.25];
                let want = -0.7 * ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2) - (c[0] * c[0] + c[1] * c[1]));
                assert!((pl.at(0, i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_splits_partition_columns() {
        for (qk, nh) in [(16, 9), (9, 9), (32, 9), (64, 4)] {
            let mut next = 0;
            for h in 0..nh {
                let (s, len) = head_split(qk, nh, h);
                assert_eq!(s, next);
                assert!(len >= 1);
                next = s + len;
            }
            assert_eq!(next, qk);
        }
    }

    #[test]
    fn cache_invalidates_on_parameter_change() {
        let mut rng = rand::rng();
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(4, 3, 3), &mut rng).unwrap();
        let a = layer.positional_logits(3, 3).unwrap();
        let b = layer.positional_logits(3, 3).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        layer.positional_logits(5, 4).unwrap();
        assert_eq!(layer.cached_resolutions(), 2);
        layer.alpha_raw = Tensor::full(&[4], 2.0).requires_grad_();
        let c = layer.positional_logits(3, 3).unwrap();
        assert!(!Arc::ptr_eq(&a, &c));
        assert_eq!(layer.cached_resolutions(), 1);
    }
}
