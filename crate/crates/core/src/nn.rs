//! Convolutional backbone layers.

use std::sync::Mutex;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, NormStats};
use crate::tensor::{Element, Tensor};

/// Visitor over named tensors, used for checkpoints and optimizers.
pub trait Parameters<T: Element> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    /// Non-trainable state (running statistics).
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, Tensor<T>)) {}

    fn load_buffer(&self, _name: &str, _value: &Tensor<T>) -> Result<bool> {
        Ok(false)
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He (fan-in) normal initialization.
pub fn he_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct ConvLayer<T: Element> {
    /// C_out×C_in×k×k.
    pub filter: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvLayer<T> {
    pub fn new(filter: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        if filter.rank() != 4 {
            return Err(Error::Shape(format!("conv filter must be rank 4, got {:?}", filter.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [filter.shape()[0]] {
                return Err(Error::dim("ConvLayer::new", filter.shape(), b.shape()));
            }
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(ConvLayer { filter: filter.requires_grad_(), bias: bias.map(Tensor::requires_grad_), stride, padding })
    }

    pub fn he_init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let filter = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        Self::new(filter, None, stride, padding).expect("valid conv geometry")
    }

    pub fn in_channels(&self) -> usize {
        self.filter.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.filter.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.filter.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels() {
            return Err(Error::dim("conv_forward", x.shape(), self.filter.shape()));
        }
        let y = ops::conv2d(x, &self.filter, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => ops::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

impl<T: Element> Parameters<T> for ConvLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.filter);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.filter);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
struct RunningStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug)]
pub struct BatchNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running: Mutex<RunningStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> Clone for BatchNorm<T> {
    fn clone(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running: Mutex::new(self.running.lock().expect("bn lock").clone()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]).requires_grad_(),
            beta: Tensor::zeros(&[channels]).requires_grad_(),
            running: Mutex::new(RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
            }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Vec<T> {
        self.running.lock().expect("bn lock").mean.clone()
    }

    pub fn running_var(&self) -> Vec<T> {
        self.running.lock().expect("bn lock").var.clone()
    }

    pub fn set_running(&self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("BatchNorm::set_running", &[c], &[mean.len(), var.len()]));
        }
        if var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Data("running variance must be non-negative".into()));
        }
        *self.running.lock().expect("bn lock") = RunningStats { mean, var };
        Ok(())
    }

    /// Training mode normalizes by batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates only.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.channels() {
            return Err(Error::dim("batchnorm_forward", x.shape(), self.gamma.shape()));
        }
        if !training {
            let stats = self.running.lock().expect("bn lock").clone();
            let out = ops::batch_norm(
                x,
                &self.gamma,
                &self.beta,
                NormStats::Fixed { mean: &stats.mean, var: &stats.var },
                self.eps,
            )?;
            return Ok(out.y);
        }
        let out = ops::batch_norm(x, &self.gamma, &self.beta, NormStats::Batch, self.eps)?;
        let n = x.numel() / self.channels();
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        let mut rs = self.running.lock().expect("bn lock");
        for c in 0..self.channels() {
            rs.mean[c] = T::c((1.0 - m) * rs.mean[c].f64() + m * out.mean[c].f64());
            rs.var[c] = T::c((1.0 - m) * rs.var[c].f64() + m * out.var[c].f64() * unbias);
        }
        Ok(out.y)
    }
}

impl<T: Element> Parameters<T> for BatchNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor<T>)) {
        let c = self.channels();
        let rs = self.running.lock().expect("bn lock");
        f(join(prefix, "running_mean"), Tensor::leaf(rs.mean.clone(), vec![c], false));
        f(join(prefix, "running_var"), Tensor::leaf(rs.var.clone(), vec![c], false));
    }

    fn load_buffer(&self, name: &str, value: &Tensor<T>) -> Result<bool> {
        let mut rs = self.running.lock().expect("bn lock");
        let slot = match name {
            "running_mean" => &mut rs.mean,
            "running_var" => &mut rs.var,
            _ => return Ok(false),
        };
        if value.numel() != slot.len() {
            return Err(Error::dim("BatchNorm::load_buffer", &[slot.len()], value.shape()));
        }
        *slot = value.to_vec();
        Ok(true)
    }
}

/// Zero padding of `pad` pixels per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad2D {
    pub pad: usize,
}

impl Pad2D {
    pub fn forward<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::pad2d(x, self.pad)
    }

    /// Removes the border this layer adds.
    pub fn crop<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h < 2 * self.pad + 1 || w < 2 * self.pad + 1 {
            return Err(Error::dim("Pad2D::crop", x.shape(), &[self.pad]));
        }
        ops::crop2d(x, self.pad, self.pad, h - 2 * self.pad, w - 2 * self.pad)
    }
}

pub fn avgpool2d<T: Element>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    ops::avgpool2d(x, window, stride)
}

/// Residual-branch dropping with rate `drop_prob`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StochasticDepth {
    pub drop_prob: f64,
}

impl StochasticDepth {
    pub fn new(drop_prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Config(format!("stochastic depth rate must be in [0, 1), got {drop_prob}")));
        }
        Ok(StochasticDepth { drop_prob })
    }

    /// Per sample: 0 with probability `drop_prob`, otherwise `branch / (1 − drop_prob)`.
    /// Identity in eval mode or when the rate is 0.
    pub fn apply<T: Element, R: Rng + ?Sized>(
        &self,
        branch: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if !training || self.drop_prob == 0.0 {
            return Ok(branch.clone());
        }
        let keep = 1.0 - self.drop_prob;
        let batch = branch.shape()[0];
        let factors: Vec<T> = (0..batch)
            .map(|_| if rng.random::<f64>() < self.drop_prob { T::zero() } else { T::c(1.0 / keep) })
            .collect();
        ops::scale_per_sample(branch, &factors)
    }
}

/// Fully connected layer `x · W + b` with W of shape in×out.
#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[d_in, d_out], -bound, bound, rng).requires_grad_(),
            bias: Tensor::zeros(&[d_out]).requires_grad_(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add_bias_last(&ops::matmul(x, &self.weight)?, &self.bias)
    }
}

impl<T: Element> Parameters<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
