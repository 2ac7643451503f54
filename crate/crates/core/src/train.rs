//! The training loop: gated forward, running-salience update, selection,
//! hybrid objective, backward, SGD step.
//!
//! A run has `shrink_epochs` epochs with the shrinking schedule active and then
//! `finetune_epochs` with the running salience and selection frozen and the
//! masks applied.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{synth_dataset, Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::network::{ArchSpec, Gate, Network};
use crate::nn::Mode;
use crate::optim::{Parameters, Sgd};
use crate::shrinking::{batch_mean, hybrid_objective, lambda_at, shrink_loss, ShrinkConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Shrinking loss on the `K` lowest running-salience channels.
    Pcs,
    /// The `K` lowest running-salience channels are hard-zeroed; no shrinking loss.
    Truncation,
    /// Like `Pcs` but channels are ordered by the current batch's mean salience.
    InputDependent,
    /// `Pcs` with the shrinking rate forced to zero.
    Baseline,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Pcs => "pcs",
            RunMode::Truncation => "truncation",
            RunMode::InputDependent => "input-dependent",
            RunMode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}` (pcs|truncation|input-dependent|baseline)")))
    }
}

/// One run, read from a flat JSON object. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: String,
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub image_size: usize,
    pub noise: f32,
    pub shrink_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Reshuffle the training set every epoch; off keeps file order.
    pub shuffle: bool,
    pub lr: f32,
    /// Fractions of the total epoch count at which the learning rate decays.
    pub lr_milestones: Vec<f32>,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lambda_base: f32,
    pub k_fraction: f32,
    pub alpha: f32,
    pub mode: RunMode,
    /// Drop the task loss from the objective (pure-shrinking diagnostics).
    pub disable_task_loss: bool,
    /// Per-layer selection counts overriding `k_fraction` (matched ablations).
    pub k_override: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arch: "toy-cnn".into(),
            classes: 4,
            train_samples: 256,
            val_samples: 128,
            image_size: 32,
            noise: 0.5,
            shrink_epochs: 40,
            finetune_epochs: 4,
            batch_size: 32,
            shuffle: true,
            lr: 0.05,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_base: 5.0,
            k_fraction: 0.5,
            alpha: 0.5,
            mode: RunMode::Pcs,
            disable_task_loss: false,
            k_override: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            image_size: self.image_size,
            channels: 3,
            noise: self.noise,
        }
    }

    pub fn shrink(&self) -> ShrinkConfig {
        ShrinkConfig {
            lambda_base: if self.mode == RunMode::Baseline { 0.0 } else { self.lambda_base },
            t_max: self.shrink_epochs,
            k_fraction: self.k_fraction,
            alpha: self.alpha,
            fine_tune_epochs: self.finetune_epochs,
        }
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::builtin(&self.arch, self.classes)
    }

    pub fn total_epochs(&self) -> usize {
        self.shrink_epochs + self.finetune_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset().validate()?;
        self.shrink().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive; momentum and weight_decay non-negative".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones are fractions in [0, 1]".into()));
        }
        self.arch()?.to_graph(self.image_size, self.image_size)?;
        Ok(())
    }

    /// Step decay at the configured fractions of the total epoch count.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let total = self.total_epochs() as f32;
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * total).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Shrink,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub task_loss: f64,
    pub shrink_loss: f64,
    pub accuracy: f64,
    pub lambda: f32,
    pub zeros: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub task_loss: f32,
    pub shrink_loss: f32,
    pub objective: f32,
}

/// Running salience and selection of one layer at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceRecord {
    pub epoch: usize,
    pub layer: String,
    pub lambda: f32,
    pub running: Vec<f32>,
    pub selection: Vec<usize>,
    pub zeros: usize,
}

/// What an observer sees after the backward pass, before the optimizer step.
/// Parameter tensors in `net` carry this step's gradients.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub net: &'a Network,
    /// Generator output per layer for this batch.
    pub salience: &'a [Tensor],
    /// Selection per layer used for this step's shrinking loss.
    pub selections: &'a [Vec<usize>],
}

#[derive(Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
    pub salience: Vec<SalienceRecord>,
    pub data: Split,
}

impl TrainOutcome {
    pub fn layer_names(&self) -> Vec<String> {
        self.net.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Selection per layer recorded at the end of `epoch`.
    pub fn selections_at(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.salience
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.selection.clone())
            .collect()
    }
}

/// Loss, accuracy and predicted classes over a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate_with(data: &Dataset, batch: usize, mut logits: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Evaluation> {
    let mut loss = 0.0f64;
    let mut predictions = Vec::with_capacity(data.len());
    for idx in data.chunks(batch) {
        let (x, y) = data.batch(&idx)?;
        let out = logits(&x)?;
        let mut g = Graph::new();
        let lv = g.input(out.clone());
        let ce = g.softmax_cross_entropy(lv, &y)?;
        loss += g.value(ce).item() as f64 * idx.len() as f64;
        predictions.extend(out.argmax_rows());
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
    })
}

pub fn evaluate(net: &Network, data: &Dataset, gate: Gate, batch: usize) -> Result<Evaluation> {
    evaluate_with(data, batch, |x| net.predict(x, gate))
}

fn divergence_dump(net: &Network, task: f32, shrink: f32) -> String {
    let layers: Vec<String> = net
        .layers()
        .iter()
        .map(|l| {
            let r = l.state.running();
            let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            format!("{}: zeros={} max_running={max}", l.name, l.state.zero_count())
        })
        .collect();
    format!("task_loss={task} shrink_loss={shrink}; {}", layers.join("; "))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_observed(cfg, &mut |_| Ok(()))
}

/// Runs the full schedule, calling `observer` after every backward pass.
pub fn train_observed(cfg: &RunConfig, observer: &mut dyn FnMut(&StepView) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shrink = cfg.shrink();
    let data = synth_dataset(&cfg.dataset(), cfg.seed)?;
    let mut init = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut net = Network::new(cfg.arch()?, &mut init)?;
    let n_layers = net.layers().len();
    if let Some(ks) = &cfg.k_override {
        if ks.len() != n_layers {
            return Err(Error::Config(format!("k_override has {} entries for {n_layers} layers", ks.len())));
        }
    }
    for (i, l) in net.layers_mut().into_iter().enumerate() {
        let c = l.state.channels();
        l.state.k = match &cfg.k_override {
            Some(ks) if ks[i] >= c => {
                return Err(Error::Config(format!("k_override {} for `{}` must be below {c}", ks[i], l.name)));
            }
            Some(ks) => ks[i],
            None => shrink.k_for(c),
        };
        l.state.alpha = shrink.alpha;
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    let mut records = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.total_epochs() {
        let phase = if epoch < cfg.shrink_epochs { Phase::Shrink } else { Phase::Finetune };
        if phase == Phase::Finetune && epoch == cfg.shrink_epochs {
            freeze(&mut net, cfg.mode)?;
        }
        let lambda = match phase {
            Phase::Shrink => lambda_at(&shrink, epoch),
            Phase::Finetune => 0.0,
        };
        opt.lr = cfg.lr_at(epoch);
        let (mut task_sum, mut shrink_sum, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize, 0usize);
        let order: Vec<usize> = if cfg.shuffle {
            data.train.shuffled(cfg.seed, epoch)
        } else {
            (0..data.train.len()).collect()
        };
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(idx)?;
            let gate = match (phase, cfg.mode) {
                (Phase::Finetune, _) => Gate::Masked,
                (Phase::Shrink, RunMode::Truncation) => {
                    for l in net.layers_mut() {
                        l.state.select_topk()?;
                    }
                    Gate::Truncate
                }
                (Phase::Shrink, _) => Gate::Salience,
            };
            let mut g = Graph::new();
            let xv = g.input(x);
            let out = net.forward(&mut g, xv, Mode::Train, gate)?;
            let logits = out.logits;
            let salience: Vec<_> = out.salience.iter().map(|s| s.expect("generator ran")).collect();
            let values: Vec<Tensor> = salience.iter().map(|&s| g.value(s).clone()).collect();
            net.commit(out);

            let mut selections = Vec::with_capacity(n_layers);
            let mut losses = Vec::new();
            for (l, (s, value)) in net.layers_mut().into_iter().zip(salience.iter().zip(&values)) {
                if phase == Phase::Shrink {
                    l.state.ema_update(value, Mode::Train)?;
                    match cfg.mode {
                        RunMode::Pcs | RunMode::Baseline => {
                            l.state.select_topk()?;
                        }
                        RunMode::InputDependent => {
                            l.state.select_by(&batch_mean(value))?;
                        }
                        RunMode::Truncation => {}
                    }
                    if cfg.mode != RunMode::Truncation {
                        losses.push(shrink_loss(&mut g, *s, l.state.last_selection())?);
                    }
                }
                selections.push(l.state.last_selection().to_vec());
            }
            let task = g.softmax_cross_entropy(logits, &y)?;
            let task_value = g.value(task).item();
            let shrink_value = if losses.is_empty() {
                0.0
            } else {
                let total = g.sum_scalars(&losses)?;
                g.value(total).item()
            };
            let objective = if cfg.disable_task_loss {
                let total = if losses.is_empty() {
                    g.scale(task, 0.0)?
                } else {
                    g.sum_scalars(&losses)?
                };
                g.scale(total, lambda)?
            } else {
                hybrid_objective(&mut g, task, &losses, lambda)?
            };
            let objective_value = g.value(objective).item();
            if !(task_value.is_finite() && shrink_value.is_finite() && objective_value.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    dump: divergence_dump(&net, task_value, shrink_value),
                });
            }
            correct += g
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, l)| p == l)
                .count();
            seen += y.len();
            let grads = g.backward(objective)?;
            grads.apply(&mut net);
            observer(&StepView {
                epoch,
                step,
                phase,
                net: &net,
                salience: &values,
                selections: &selections,
            })?;
            if let Err(Error::NonFinite { .. }) = opt.step(&mut net) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    dump: divergence_dump(&net, task_value, shrink_value),
                });
            }
            task_sum += task_value as f64 * y.len() as f64;
            shrink_sum += shrink_value as f64 * y.len() as f64;
            steps.push(StepRecord {
                epoch,
                step,
                phase,
                task_loss: task_value,
                shrink_loss: shrink_value,
                objective: objective_value,
            });
            step += 1;
        }
        net.zero_grad();

        let zeros: Vec<usize> = net.layers().iter().map(|l| l.state.zero_count()).collect();
        metrics.push(MetricsRow {
            epoch,
            split: "train",
            task_loss: task_sum / seen as f64,
            shrink_loss: shrink_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            lambda,
            zeros: zeros.clone(),
        });
        let val_gate = match phase {
            Phase::Shrink => Gate::Salience,
            Phase::Finetune => Gate::Masked,
        };
        let val = evaluate(&net, &data.val, val_gate, cfg.batch_size)?;
        metrics.push(MetricsRow {
            epoch,
            split: "val",
            task_loss: val.loss,
            shrink_loss: 0.0,
            accuracy: val.accuracy,
            lambda,
            zeros,
        });
        for l in net.layers() {
            records.push(SalienceRecord {
                epoch,
                layer: l.name.clone(),
                lambda,
                running: l.state.running().to_vec(),
                selection: l.state.last_selection().to_vec(),
                zeros: l.state.zero_count(),
            });
        }
    }
    if cfg.finetune_epochs == 0 {
        freeze(&mut net, cfg.mode)?;
    }
    Ok(TrainOutcome {
        net,
        metrics,
        steps,
        salience: records,
        data,
    })
}

/// Ends the shrinking phase. Truncation pins its final selection to zero so
/// the masks prune exactly the truncated channels.
fn freeze(net: &mut Network, mode: RunMode) -> Result<()> {
    for l in net.layers_mut() {
        match mode {
            RunMode::Truncation => {
                let sel = l.state.select_topk()?.to_vec();
                for c in sel {
                    l.state.running_mut()[c] = 0.0;
                }
            }
            _ => {
                let zeros: Vec<usize> = (0..l.state.channels()).filter(|&c| l.state.running()[c] == 0.0).collect();
                if zeros.len() >= l.state.k && l.state.k > 0 {
                    l.state.set_selection(zeros);
                }
            }
        }
    }
    Ok(())
}

pub fn write_metrics_csv(rows: &[MetricsRow], layers: &[String], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "split", "task_loss", "shrink_loss", "accuracy", "lambda"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(layers.iter().map(|l| format!("zeros_{l}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.split.to_string(),
            format!("{:.6}", r.task_loss),
            format!("{:.6}", r.shrink_loss),
            format!("{:.6}", r.accuracy),
            format!("{:e}", r.lambda),
        ];
        rec.extend(r.zeros.iter().map(|z| z.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

pub fn write_salience_csv(records: &[SalienceRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "layer", "lambda", "zeros", "selection", "running"])?;
    let join = |v: Vec<String>| v.join(";");
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.layer.clone(),
            format!("{:e}", r.lambda),
            r.zeros.to_string(),
            join(r.selection.iter().map(|c| c.to_string()).collect()),
            join(r.running.iter().map(|v| format!("{v:e}")).collect()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("salience", e))?;
    Ok(())
}

pub fn write_steps_csv(steps: &[StepRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "step", "phase", "task_loss", "shrink_loss", "objective"])?;
    for s in steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            match s.phase {
                Phase::Shrink => "shrink".to_string(),
                Phase::Finetune => "finetune".to_string(),
            },
            format!("{:e}", s.task_loss),
            format!("{:e}", s.shrink_loss),
            format!("{:e}", s.objective),
        ])?;
    }
    w.flush().map_err(|e| Error::io("steps", e))?;
    Ok(())
}

/// Population variance of the per-step task loss over the shrinking phase.
pub fn shrink_phase_loss_variance(steps: &[StepRecord]) -> f64 {
    let v: Vec<f64> = steps
        .iter()
        .filter(|s| s.phase == Phase::Shrink)
        .map(|s| s.task_loss as f64)
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}
