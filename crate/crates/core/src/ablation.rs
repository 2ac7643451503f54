//! Side-by-side runs of the running shrinking policy against truncation and
//! input-dependent selection.

use serde::Serialize;

use crate::autograd::Graph;
use crate::compaction::{compact_network, plan_for, ScaleMode};
use crate::cost::network_totals;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Gate, Network};
use crate::nn::Mode;
use crate::salience::rank_lowest;
use crate::tensor::Tensor;
use crate::train::{evaluate, evaluate_with, shrink_phase_loss_variance, train, RunConfig, RunMode, TrainOutcome};

/// Per input, per layer: channels whose applied scale is exactly zero.
pub type ZeroSets = Vec<Vec<Vec<usize>>>;

pub fn zero_sets(net: &Network, images: &Tensor, gate: Gate) -> Result<ZeroSets> {
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let out = net.forward(&mut g, x, Mode::Eval, gate)?;
    let n = images.dim(0);
    let mut sets = vec![Vec::with_capacity(out.scales.len()); n];
    for &scale in &out.scales {
        let v = g.value(scale);
        let c = v.dim(1);
        for (row, set) in v.data().chunks(c).zip(sets.iter_mut()) {
            set.push((0..c).filter(|&i| row[i] == 0.0).collect());
        }
    }
    Ok(sets)
}

/// Per input, per layer: the `k` channels with the lowest salience for that
/// input alone, as an input-dependent scheme would select them.
pub fn ranked_sets(net: &Network, images: &Tensor) -> Result<ZeroSets> {
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let out = net.forward(&mut g, x, Mode::Eval, Gate::Salience)?;
    let mut sets = vec![Vec::with_capacity(out.salience.len()); images.dim(0)];
    for (layer, s) in net.layers().iter().zip(&out.salience) {
        let s = s.ok_or_else(|| Error::Config(format!("layer {} produced no salience", layer.name)))?;
        let v = g.value(s);
        let c = v.dim(1);
        for (row, set) in v.data().chunks(c).zip(sets.iter_mut()) {
            let mut lowest = rank_lowest(row, layer.state.k);
            lowest.sort_unstable();
            set.push(lowest);
        }
    }
    Ok(sets)
}

/// Fraction of inputs whose zero sets equal the most common one.
pub fn agreement_rate(sets: &ZeroSets) -> f64 {
    if sets.is_empty() {
        return 1.0;
    }
    let mut counts: Vec<(&Vec<Vec<usize>>, usize)> = Vec::new();
    for s in sets {
        match counts.iter_mut().find(|(k, _)| *k == s) {
            Some((_, n)) => *n += 1,
            None => counts.push((s, 1)),
        }
    }
    let modal = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    modal as f64 / sets.len() as f64
}

/// Per-input masks under the scheme each mode deploys: the frozen zero set
/// of `s̄` for static schemes, each input's own lowest-`k` channels for the
/// input-dependent one.
pub fn deployed_masks(net: &Network, images: &Tensor, mode: RunMode) -> Result<ZeroSets> {
    match mode {
        RunMode::InputDependent => ranked_sets(net, images),
        _ => zero_sets(net, images, Gate::Static),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: &'static str,
    pub val_accuracy: f64,
    /// Variance of the per-step task loss over the shrinking phase.
    pub loss_variance: f64,
    /// Agreement of the masks the mode deploys.
    pub agreement_rate: f64,
    /// Agreement of per-input lowest-`k` rankings on the same net.
    pub ranking_agreement: f64,
    pub agreement_inputs: usize,
    pub zeros: Vec<usize>,
    pub madds: u64,
    pub pruned_madds: u64,
}

pub fn mode_report(cfg: &RunConfig, out: &TrainOutcome, probe: usize) -> Result<ModeReport> {
    let net = &out.net;
    let hw = cfg.image_size;
    let graph = net.to_graph(hw, hw)?;
    let plan = plan_for(net, hw, 0.0)?;
    let cost = network_totals(&graph, Some(&plan))?;
    let val_accuracy = match cfg.mode {
        RunMode::InputDependent => evaluate(net, &out.data.val, Gate::Salience, cfg.batch_size)?.accuracy,
        _ => {
            let compact = compact_network(net, &plan, ScaleMode::Static)?;
            evaluate_with(&out.data.val, cfg.batch_size, |x| compact.predict(x))?.accuracy
        }
    };
    let (images, n) = probe_inputs(&out.data.val, probe)?;
    let sets = deployed_masks(net, &images, cfg.mode)?;
    let ranked = ranked_sets(net, &images)?;
    Ok(ModeReport {
        mode: cfg.mode.as_str(),
        val_accuracy,
        loss_variance: shrink_phase_loss_variance(&out.steps),
        agreement_rate: agreement_rate(&sets),
        ranking_agreement: agreement_rate(&ranked),
        agreement_inputs: n,
        zeros: net.layers().iter().map(|l| l.state.zero_count()).collect(),
        madds: cost.total.madds,
        pruned_madds: cost.pruned_total.expect("plan given").madds,
    })
}

/// The first `count` validation samples.
pub fn probe_inputs(val: &Dataset, count: usize) -> Result<(Tensor, usize)> {
    let n = count.min(val.len());
    if n == 0 {
        return Err(Error::Config("no validation samples to probe".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok((val.batch(&idx)?.0, n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub pcs: ModeReport,
    pub truncation: ModeReport,
    pub input_dependent: ModeReport,
}

pub struct Ablation {
    pub report: AblationReport,
    pub pcs: TrainOutcome,
    pub truncation: TrainOutcome,
    pub input_dependent: TrainOutcome,
}

/// Trains `cfg` under the running policy, then truncation with each layer's
/// `K` matched to the zero count PCS reached, then input-dependent selection.
pub fn run_mode_ablation(cfg: &RunConfig, probe: usize) -> Result<Ablation> {
    let pcs_cfg = RunConfig {
        mode: RunMode::Pcs,
        ..cfg.clone()
    };
    let pcs = train(&pcs_cfg)?;
    run_mode_ablation_from(cfg, pcs, probe)
}

/// As [`run_mode_ablation`], reusing a finished PCS run of `cfg`.
pub fn run_mode_ablation_from(cfg: &RunConfig, pcs: TrainOutcome, probe: usize) -> Result<Ablation> {
    let with_mode = |mode, k_override| RunConfig {
        mode,
        k_override,
        ..cfg.clone()
    };
    let pcs_cfg = with_mode(RunMode::Pcs, cfg.k_override.clone());
    let matched: Vec<usize> = pcs.net.layers().iter().map(|l| l.state.zero_count()).collect();
    let trunc_cfg = with_mode(RunMode::Truncation, Some(matched));
    let truncation = train(&trunc_cfg)?;
    let dep_cfg = with_mode(RunMode::InputDependent, cfg.k_override.clone());
    let input_dependent = train(&dep_cfg)?;
    let report = AblationReport {
        pcs: mode_report(&pcs_cfg, &pcs, probe)?,
        truncation: mode_report(&trunc_cfg, &truncation, probe)?,
        input_dependent: mode_report(&dep_cfg, &input_dependent, probe)?,
    };
    Ok(Ablation {
        report,
        pcs,
        truncation,
        input_dependent,
    })
}
