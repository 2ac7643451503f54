//! Per-channel salience: the GAP → FC → ReLU → FC → hard-sigmoid generator,
//! channel reweighing, and the truncation baseline.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, State};
use crate::optim::Parameters;
use crate::tensor::Tensor;

pub const REDUCTION: usize = 4;
pub const MIN_HIDDEN: usize = 4;

/// Maps a layer's input feature maps to one salience entry in `[0, 1]` per
/// output channel.
#[derive(Debug, Clone)]
pub struct SalienceGenerator {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub fn hidden_width(c_in: usize) -> usize {
    (c_in / REDUCTION).max(MIN_HIDDEN)
}

impl SalienceGenerator {
    /// Both biases start at zero, so a zero input yields salience 0.5 everywhere.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(c_in);
        SalienceGenerator {
            fc1: Linear::new(c_in, hidden, rng),
            fc2: Linear::new(hidden, c_out, rng),
        }
    }

    pub fn c_in(&self) -> usize {
        self.fc1.f_in()
    }

    pub fn c_out(&self) -> usize {
        self.fc2.f_out()
    }

    /// Returns the fc2 pre-activation and the salience `[N, C_out]`.
    pub fn forward_with_logits(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != self.c_in() {
            return Err(Error::shape(
                "generate_salience",
                format!("features {xs:?} for a generator over {} channels", self.c_in()),
            ));
        }
        let pooled = g.gap(x)?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h)?;
        let z = self.fc2.forward(g, h)?;
        let s = g.hard_sigmoid(z)?;
        Ok((z, s))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_with_logits(g, x)?.1)
    }

    /// Keeps input columns `in_keep` of fc1 and output rows `out_keep` of fc2.
    pub fn gather(&self, in_keep: &[usize], out_keep: &[usize]) -> Result<SalienceGenerator> {
        Ok(SalienceGenerator {
            fc1: Linear {
                weight: self.fc1.weight.gather(1, in_keep)?,
                bias: self.fc1.bias.clone(),
            },
            fc2: Linear {
                weight: self.fc2.weight.gather(0, out_keep)?,
                bias: self.fc2.bias.gather(0, out_keep)?,
            },
        })
    }
}

impl Parameters for SalienceGenerator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        // no weight decay: decay must not masquerade as shrinking
        f("fc1.weight", &mut self.fc1.weight, false);
        f("fc1.bias", &mut self.fc1.bias, false);
        f("fc2.weight", &mut self.fc2.weight, false);
        f("fc2.bias", &mut self.fc2.bias, false);
    }
}

impl State for SalienceGenerator {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit_state(&mut crate::nn::prefixed("fc1", f));
        self.fc2.visit_state(&mut crate::nn::prefixed("fc2", f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_state_mut(&mut crate::nn::prefixed_mut("fc1", f));
        self.fc2.visit_state_mut(&mut crate::nn::prefixed_mut("fc2", f));
    }
}

/// `x'[n, c] = s[n, c] * x[n, c]`.
pub fn reweigh(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    g.reweigh(x, s)
}

/// Threshold truncation: entries below `eta` become 0, the rest pass through
/// with an identity gradient.
pub fn truncate(g: &mut Graph, s: Var, eta: f32) -> Result<Var> {
    if !(eta >= 0.0) {
        return Err(Error::Config(format!("truncation threshold {eta} must be >= 0")));
    }
    let keep: Vec<bool> = g.value(s).data().iter().map(|&v| !(v < eta)).collect();
    g.mask(s, &keep)
}

/// Rank truncation: zeroes the `floor(fraction * C)` smallest entries of each row.
pub fn truncate_lowest_fraction(g: &mut Graph, s: Var, fraction: f32) -> Result<Var> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("truncation fraction {fraction} outside [0, 1]")));
    }
    let shape = g.shape(s).to_vec();
    let cols = *shape.last().unwrap_or(&1);
    let k = (fraction * cols as f32).floor() as usize;
    let mut keep = vec![true; g.value(s).numel()];
    for (r, row) in g.value(s).data().chunks(cols).enumerate() {
        for c in rank_lowest(row, k) {
            keep[r * cols + c] = false;
        }
    }
    g.mask(s, &keep)
}

/// Zeroes the given columns of `[N, C]` for every row.
pub fn truncate_columns(g: &mut Graph, s: Var, columns: &[usize]) -> Result<Var> {
    let cols = g.shape(s)[1];
    let mut keep = vec![true; cols];
    for &c in columns {
        if c >= cols {
            return Err(Error::IndexOutOfRange { index: c, len: cols });
        }
        keep[c] = false;
    }
    g.mask(s, &keep)
}

/// Indices of the `k` smallest values, ascending by value; ties go to the lower index.
pub fn rank_lowest(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
