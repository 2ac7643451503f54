//! Pure shrinking on one fixed batch: no task loss, no momentum, no decay.

use pcs::shrinking::batch_mean;
use pcs::train::{train_observed, Phase, RunConfig, StepView};

pub fn config() -> RunConfig {
    RunConfig {
        seed: 7,
        train_samples: 32,
        val_samples: 8,
        batch_size: 32,
        shuffle: false,
        image_size: 16,
        shrink_epochs: 100,
        lambda_base: 20.0,
        lr_milestones: vec![],
        finetune_epochs: 0,
        momentum: 0.0,
        weight_decay: 0.0,
        disable_task_loss: true,
        ..RunConfig::default()
    }
}

#[derive(Debug, Default)]
pub struct DynamicsReport {
    pub steps: usize,
    /// (step, layer, channel, before, after) where a selected entry grew.
    pub increases: Vec<(usize, usize, usize, f32, f32)>,
    /// Steps at which a layer's summed selected salience grew under an
    /// unchanged selection.
    pub layer_sum_increases: usize,
    /// Increases confined to the first layer, whose input is the fixed batch.
    pub first_layer_increases: usize,
    /// Final-step selected channels whose batch-mean salience is not exactly 0.
    pub nonzero_selected: usize,
    pub selected_total: usize,
    /// Step at which the first all-zero channel appeared.
    pub first_zero_step: Option<usize>,
    /// Channel-steps checked after zeros appeared, and those with any nonzero
    /// fc2 gradient in the channel's row or bias.
    pub zero_channel_checks: usize,
    pub leaking_gradients: usize,
}

impl DynamicsReport {
    /// Every selected entry reached exact zero and zeroed channels stopped
    /// receiving generator gradient.
    pub fn reaches_zero_without_leaks(&self) -> bool {
        self.nonzero_selected == 0
            && self.selected_total > 0
            && self.first_zero_step.is_some()
            && self.zero_channel_checks > 0
            && self.leaking_gradients == 0
    }

    /// Additionally, no selected entry ever grew between steps.
    pub fn passed(&self) -> bool {
        self.increases.is_empty() && self.reaches_zero_without_leaks()
    }
}

pub fn run(cfg: &RunConfig) -> DynamicsReport {
    let mut report = DynamicsReport::default();
    let mut prev: Option<(Vec<Vec<f32>>, Vec<Vec<usize>>)> = None;
    let mut last: Vec<(Vec<f32>, Vec<usize>)> = Vec::new();
    let mut observer = |v: &StepView| -> pcs::Result<()> {
        assert_eq!(v.phase, Phase::Shrink);
        let means: Vec<Vec<f32>> = v.salience.iter().map(batch_mean).collect();
        if let Some((before, selections)) = &prev {
            for (l, sel) in selections.iter().enumerate() {
                if sel == &v.selections[l] {
                    let sum = |m: &[f32]| sel.iter().map(|&c| m[c] as f64).sum::<f64>();
                    if sum(&means[l]) > sum(&before[l]) {
                        report.layer_sum_increases += 1;
                    }
                }
                for &c in sel {
                    if l == 0 && means[l][c] > before[l][c] {
                        report.first_layer_increases += 1;
                    }
                    if means[l][c] > before[l][c] {
                        report.increases.push((v.step, l, c, before[l][c], means[l][c]));
                    }
                }
            }
        }
        for (layer, s) in v.net.layers().iter().zip(v.salience) {
            let c_out = s.dim(1);
            let hidden = layer.generator.fc2.weight.dim(1);
            for c in 0..c_out {
                if !s.data().chunks(c_out).all(|row| row[c] == 0.0) {
                    continue;
                }
                report.first_zero_step.get_or_insert(v.step);
                report.zero_channel_checks += 1;
                let w = layer.generator.fc2.weight.grad.as_deref();
                let b = layer.generator.fc2.bias.grad.as_deref();
                let row_zero = w.is_none_or(|g| g[c * hidden..(c + 1) * hidden].iter().all(|&x| x == 0.0));
                let bias_zero = b.is_none_or(|g| g[c] == 0.0);
                if !(row_zero && bias_zero) {
                    report.leaking_gradients += 1;
                }
            }
        }
        last = means.iter().cloned().zip(v.selections.iter().cloned()).collect();
        prev = Some((means, v.selections.to_vec()));
        report.steps += 1;
        Ok(())
    };
    train_observed(cfg, &mut observer).expect("pure shrinking run");
    for (means, sel) in &last {
        report.selected_total += sel.len();
        report.nonzero_selected += sel.iter().filter(|&&c| means[c] != 0.0).count();
    }
    report
}
