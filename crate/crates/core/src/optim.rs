//! SGD with momentum over the parameters a model exposes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns trainable tensors.
///
/// `visit_params` must enumerate parameters in the same order on every call;
/// optimizer state is keyed by that order.
pub trait Parameters {
    /// Calls `f(name, tensor, decay)` for every trainable tensor.
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, t, _| t.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t, _| n += t.numel());
        n
    }
}

/// `v <- momentum*v + g + wd*p`, `p <- p - lr*v`, then the gradient is cleared.
/// Parameters visited with `decay == false` skip the weight-decay term.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Parameters) -> Result<()> {
        let (lr, momentum, weight_decay) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut index = 0;
        let mut bad = false;
        model.visit_params(&mut |_, t, decay| {
            if velocity.len() <= index {
                velocity.push(vec![0.0; t.numel()]);
            }
            let vel = &mut velocity[index];
            index += 1;
            let Some(grad) = t.grad.take() else {
                return;
            };
            let wd = if decay { weight_decay } else { 0.0 };
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = momentum * *v + *g + wd * *w;
                *w -= lr * *v;
            }
            bad |= !t.all_finite();
        });
        if bad {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two {
        a: Tensor,
        b: Tensor,
    }

    impl Parameters for Two {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
            f("a", &mut self.a, true);
            f("b", &mut self.b, false);
        }
    }

    fn two(a: f32, b: f32) -> Two {
        Two {
            a: Tensor::scalar(a),
            b: Tensor::scalar(b),
        }
    }

    #[test]
    fn plain_step() {
        let mut m = two(3.0, 0.0);
        m.a.accumulate_grad(&[6.0]);
        Sgd::new(0.1, 0.0, 0.0).step(&mut m).unwrap();
        assert!((m.a.item() - 2.4).abs() < 1e-6);
        assert!(m.a.grad.is_none());
        // no gradient, no movement
        assert_eq!(m.b.item(), 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let mut m = two(0.0, 0.0);
        let mut opt = Sgd::new(1.0, 0.9, 0.0);
        m.a.accumulate_grad(&[1.0]);
        opt.step(&mut m).unwrap();
        assert_eq!(m.a.item(), -1.0);
        m.a.accumulate_grad(&[1.0]);
        opt.step(&mut m).unwrap();
        // second velocity = 0.9*g + g
        assert!((m.a.item() - (-1.0 - 1.9)).abs() < 1e-6);
    }

    #[test]
    fn decay_respects_opt_out() {
        let mut m = two(1.0, 1.0);
        m.a.accumulate_grad(&[0.0]);
        m.b.accumulate_grad(&[0.0]);
        Sgd::new(0.5, 0.0, 0.1).step(&mut m).unwrap();
        assert!((m.a.item() - 0.95).abs() < 1e-7);
        assert_eq!(m.b.item(), 1.0);
    }
}
