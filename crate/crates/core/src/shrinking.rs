//! Running shrinking policy and the shrinking loss.
//!
//! Each gated layer keeps a running salience vector (an EMA of the batch-mean
//! salience). Every step the `K` channels with the smallest running salience
//! are selected and their *current* salience is summed into the shrinking
//! loss, so only those entries receive the extra `lambda / N` gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::salience::rank_lowest;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f32 = 0.1;
pub const DEFAULT_K_FRACTION: f32 = 0.5;
pub const INITIAL_RUNNING_SALIENCE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkConfig {
    pub lambda_base: f32,
    /// Number of shrinking epochs.
    pub t_max: usize,
    /// `K = floor(k_fraction * C_out)`, clamped to `C_out - 1`.
    pub k_fraction: f32,
    /// EMA weight of the newest sample.
    pub alpha: f32,
    pub fine_tune_epochs: usize,
}

impl Default for ShrinkConfig {
    fn default() -> Self {
        ShrinkConfig {
            lambda_base: 6e-6,
            t_max: 60,
            k_fraction: DEFAULT_K_FRACTION,
            alpha: DEFAULT_ALPHA,
            fine_tune_epochs: 0,
        }
    }
}

impl ShrinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return Err(Error::Config(format!("lambda_base {} must be >= 0", self.lambda_base)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction < 1.0) {
            return Err(Error::Config(format!("k_fraction {} outside (0, 1)", self.k_fraction)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn k_for(&self, c_out: usize) -> usize {
        ((self.k_fraction * c_out as f32).floor() as usize).min(c_out.saturating_sub(1))
    }
}

/// `lambda_base * (min(t, T_max) / T_max)^2`.
pub fn lambda_at(cfg: &ShrinkConfig, t_cur: usize) -> f32 {
    let ratio = t_cur.min(cfg.t_max) as f64 / cfg.t_max as f64;
    (cfg.lambda_base as f64 * ratio * ratio) as f32
}

/// Running salience and current selection of one gated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceState {
    running: Vec<f32>,
    pub alpha: f32,
    pub k: usize,
    last_selection: Vec<usize>,
}

impl SalienceState {
    pub fn new(channels: usize, k: usize, alpha: f32) -> Self {
        SalienceState {
            running: vec![INITIAL_RUNNING_SALIENCE; channels],
            alpha,
            k,
            last_selection: Vec::new(),
        }
    }

    pub fn from_parts(running: Vec<f32>, k: usize, alpha: f32, selection: Vec<usize>) -> Self {
        SalienceState {
            running,
            alpha,
            k,
            last_selection: selection,
        }
    }

    pub fn channels(&self) -> usize {
        self.running.len()
    }

    pub fn running(&self) -> &[f32] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [f32] {
        &mut self.running
    }

    pub fn last_selection(&self) -> &[usize] {
        &self.last_selection
    }

    pub fn zero_count(&self) -> usize {
        self.running.iter().filter(|&&v| v == 0.0).count()
    }

    /// `s_bar <- (1 - alpha) * s_bar + alpha * mean_n(s[n, :])`.
    ///
    /// Results below the smallest normal `f32` are flushed to zero. Without the
    /// flush a channel whose salience is exactly zero would decay into
    /// subnormals and stall one ulp above zero under round-to-nearest.
    pub fn ema_update(&mut self, s_batch: &Tensor, mode: Mode) -> Result<()> {
        if mode != Mode::Train {
            return Err(Error::NotTraining { op: "ema_update" });
        }
        let shape = s_batch.shape();
        if shape.len() != 2 || shape[1] != self.running.len() {
            return Err(Error::shape(
                "ema_update",
                format!("salience {shape:?} for {} channels", self.running.len()),
            ));
        }
        let mean = batch_mean(s_batch);
        let a = self.alpha;
        for (r, m) in self.running.iter_mut().zip(&mean) {
            let v = ((1.0 - a) * *r + a * m).min(1.0);
            *r = if v < f32::MIN_POSITIVE { 0.0 } else { v };
        }
        Ok(())
    }

    /// Selects the `K` channels with the smallest running salience; ties go
    /// to the lower channel index.
    pub fn select_topk(&mut self) -> Result<&[usize]> {
        let ordering = self.running.clone();
        self.select_by(&ordering)
    }

    /// Same rule as [`select_topk`](Self::select_topk) but ordered by arbitrary
    /// values (the input-dependent comparator uses the current batch mean).
    pub fn select_by(&mut self, values: &[f32]) -> Result<&[usize]> {
        if self.k >= self.running.len() {
            return Err(Error::Config(format!(
                "K = {} must be below the channel count {}",
                self.k,
                self.running.len()
            )));
        }
        if values.len() != self.running.len() {
            return Err(Error::shape(
                "select",
                format!("{} ordering values for {} channels", values.len(), self.running.len()),
            ));
        }
        self.last_selection = rank_lowest(values, self.k);
        Ok(&self.last_selection)
    }

    /// Pins the selection (used when freezing or replaying a policy).
    pub fn set_selection(&mut self, selection: Vec<usize>) {
        self.last_selection = selection;
    }
}

pub fn batch_mean(s: &Tensor) -> Vec<f32> {
    let c = s.dim(1);
    let n = s.dim(0);
    let mut mean = vec![0.0f32; c];
    for row in s.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f32);
    mean
}

/// Mean over the batch of the summed salience at `selection`.
pub fn shrink_loss(g: &mut Graph, s: Var, selection: &[usize]) -> Result<Var> {
    g.select_mean(s, selection)
}

/// `task + lambda * sum(shrink_losses)`.
pub fn hybrid_objective(g: &mut Graph, task: Var, shrink_losses: &[Var], lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("shrinking rate {lambda} must be >= 0")));
    }
    if shrink_losses.is_empty() {
        return Ok(task);
    }
    let total = g.sum_scalars(shrink_losses)?;
    let weighted = g.scale(total, lambda)?;
    g.add(task, weighted)
}
