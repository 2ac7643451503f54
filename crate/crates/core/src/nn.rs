//! Layer records built on the autograd primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Parameters;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone. Used for probes.
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Read/write access to every named tensor of a layer, parameters and buffers alike.
pub trait State {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn prefixed<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &Tensor),
) -> impl FnMut(&str, &Tensor) + 'a {
    move |n, t| f(&format!("{prefix}.{n}"), t)
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut Tensor),
) -> impl FnMut(&str, &mut Tensor) + 'a {
    move |n, t| f(&format!("{prefix}.{n}"), t)
}

pub(crate) fn prefixed_param<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut Tensor, bool),
) -> impl FnMut(&str, &mut Tensor, bool) + 'a {
    move |n, t, d| f(&format!("{prefix}.{n}"), t, d)
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    mean: Vec<f32>,
    var: Vec<f32>,
    count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Per-channel `(scale, shift)` equivalent to eval-mode normalization.
    pub fn eval_affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    fn forward_impl(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            Mode::Eval => {
                let (scale, shift) = self.eval_affine();
                Ok((g.channel_affine(x, &scale, &shift)?, None))
            }
            Mode::Train | Mode::BatchStats => {
                let gamma = g.param(&self.gamma);
                let beta = g.param(&self.beta);
                let shape = g.shape(x).to_vec();
                let (y, mean, var) = g.batch_norm(x, gamma, beta, self.eps)?;
                let stats = (mode == Mode::Train).then(|| BatchStats {
                    mean,
                    var,
                    count: shape[0] * shape[2] * shape[3],
                });
                Ok((y, stats))
            }
        }
    }

    fn commit(&mut self, stats: BatchStats) {
        // running variance tracks the unbiased estimate
        let correction = if stats.count > 1 {
            stats.count as f32 / (stats.count - 1) as f32
        } else {
            1.0
        };
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }

    pub fn gather(&self, keep: &[usize]) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.gamma.gather(0, keep)?,
            beta: self.beta.gather(0, keep)?,
            running_mean: self.running_mean.gather(0, keep)?,
            running_var: self.running_var.gather(0, keep)?,
            eps: self.eps,
            momentum: self.momentum,
        })
    }
}

/// Convolution, optional batch norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBlock {
    /// Fan-in scaled uniform init, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        batch_norm: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (c_in * kernel * kernel) as f32).sqrt();
        ConvBlock {
            weight: Tensor::uniform(&[c_out, c_in, kernel, kernel], -bound, bound, rng),
            bias: Tensor::zeros(&[c_out]),
            bn: batch_norm.then(|| BatchNorm::new(c_out)),
            activation,
            stride,
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub(crate) fn forward_impl(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let mut y = g.conv2d(x, w, Some(b), self.stride, self.padding)?;
        let mut stats = None;
        if let Some(bn) = &self.bn {
            let (out, s) = bn.forward_impl(g, y, mode)?;
            y = out;
            stats = s;
        }
        if self.activation == Activation::Relu {
            y = g.relu(y)?;
        }
        Ok((y, stats))
    }

    /// Forward pass; in [`Mode::Train`] the batch-norm running statistics are updated.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let (y, stats) = self.forward_impl(g, x, mode)?;
        if let Some(stats) = stats {
            self.commit(stats);
        }
        Ok(y)
    }

    pub(crate) fn commit(&mut self, stats: BatchStats) {
        if let Some(bn) = self.bn.as_mut() {
            bn.commit(stats);
        }
    }

    /// Forward pass that never mutates the block. `mode` must not be `Train`.
    pub fn infer(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        debug_assert!(mode != Mode::Train);
        Ok(self.forward_impl(g, x, mode)?.0)
    }

    /// Returns an equivalent BN-free block for eval-mode inference.
    pub fn fold_batchnorm(&self) -> Result<ConvBlock> {
        let bn = self
            .bn
            .as_ref()
            .ok_or_else(|| Error::Config("fold_batchnorm on a block without batch norm".into()))?;
        let (scale, _) = bn.eval_affine();
        let per_out = self.weight.numel() / self.c_out();
        let mut weight = self.weight.clone();
        for (o, chunk) in weight.data_mut().chunks_mut(per_out).enumerate() {
            chunk.iter_mut().for_each(|w| *w *= scale[o]);
        }
        let bias: Vec<f32> = self
            .bias
            .data()
            .iter()
            .zip(bn.running_mean.data())
            .zip(bn.beta.data())
            .zip(&scale)
            .map(|(((b, m), beta), s)| (b - m) * s + beta)
            .collect();
        weight.grad = None;
        Ok(ConvBlock {
            weight,
            bias: Tensor::new(vec![self.c_out()], bias)?,
            bn: None,
            activation: self.activation,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

impl Parameters for ConvBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f("weight", &mut self.weight, true);
        f("bias", &mut self.bias, false);
        if let Some(bn) = &mut self.bn {
            f("bn.gamma", &mut bn.gamma, false);
            f("bn.beta", &mut bn.beta, false);
        }
    }
}

impl State for ConvBlock {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
        if let Some(bn) = &self.bn {
            f("bn.gamma", &bn.gamma);
            f("bn.beta", &bn.beta);
            f("bn.running_mean", &bn.running_mean);
            f("bn.running_var", &bn.running_var);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
        if let Some(bn) = &mut self.bn {
            f("bn.gamma", &mut bn.gamma);
            f("bn.beta", &mut bn.beta);
            f("bn.running_mean", &mut bn.running_mean);
            f("bn.running_var", &mut bn.running_var);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / f_in as f32).sqrt();
        Linear {
            weight: Tensor::uniform(&[f_out, f_in], -bound, bound, rng),
            bias: Tensor::zeros(&[f_out]),
        }
    }

    pub fn f_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn f_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, Some(b))
    }
}

impl Parameters for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f("weight", &mut self.weight, true);
        f("bias", &mut self.bias, false);
    }
}

impl State for Linear {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Elementwise sum at a residual junction.
pub fn residual_add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    g.add(a, b)
}
