//! Finite-difference checks of the tape gradients against independent `f64`
//! reference implementations of each primitive.

use pcs::autograd::{Graph, Var};
use pcs::nn::{Activation, ConvBlock, Mode, BN_EPS};
use pcs::salience::SalienceGenerator;
use pcs::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Coordinates whose gradient is this small relative to the largest one in
/// the instance are compared absolutely against `REL_TOL * ABS_FLOOR * max`.
pub const ABS_FLOOR: f64 = 1e-3;
pub const INSTANCES: usize = 20;

/// Piecewise-region signature of every kinked activation the oracle passes.
#[derive(Default, Clone, PartialEq, Eq)]
pub struct Kinks(Vec<i8>);

impl Kinks {
    fn relu(&mut self, z: f64) -> f64 {
        self.0.push((z > 0.0) as i8);
        z.max(0.0)
    }

    fn hard_sigmoid(&mut self, z: f64) -> f64 {
        self.0.push(if z < -3.0 { -1 } else if z > 3.0 { 1 } else { 0 });
        ((z + 3.0) / 6.0).clamp(0.0, 1.0)
    }
}

type Oracle = Box<dyn Fn(&[Vec<f64>], &mut Kinks) -> f64>;
type Analytic = Box<dyn Fn(&[Tensor]) -> Vec<Vec<f32>>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub analytic: Analytic,
    pub oracle: Oracle,
}

#[derive(Debug, Clone, Default)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub excluded: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances >= INSTANCES && self.checked > 0
    }
}

pub fn check_instance(report: &mut CaseReport, inst: &Instance) {
    let analytic = (inst.analytic)(&inst.inputs);
    let base: Vec<Vec<f64>> = inst.inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut base_kinks = Kinks::default();
    (inst.oracle)(&base, &mut base_kinks);
    let mut numeric = Vec::new();
    for (ti, t) in base.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = base.clone();
            plus[ti][i] += EPS;
            let mut minus = base.clone();
            minus[ti][i] -= EPS;
            let (mut kp, mut km) = (Kinks::default(), Kinks::default());
            let fp = (inst.oracle)(&plus, &mut kp);
            let fm = (inst.oracle)(&minus, &mut km);
            let crosses = kp != base_kinks || km != base_kinks;
            numeric.push((ti, i, (fp - fm) / (2.0 * EPS), crosses));
        }
    }
    let scale = numeric.iter().filter(|n| !n.3).map(|n| n.2.abs()).fold(0.0f64, f64::max);
    for (ti, i, n, crosses) in numeric {
        if crosses {
            report.excluded += 1;
            continue;
        }
        let a = analytic[ti][i] as f64;
        let diff = (a - n).abs();
        let denom = a.abs().max(n.abs()).max(ABS_FLOOR * scale);
        let rel = if denom == 0.0 { 0.0 } else { diff / denom };
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("input {ti}[{i}]: analytic {a:.6e} numeric {n:.6e}");
        }
        if rel > REL_TOL {
            report.failures += 1;
        }
    }
    report.instances += 1;
}

pub fn run_case(name: &'static str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Instance) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CaseReport {
        name,
        ..Default::default()
    };
    for _ in 0..INSTANCES {
        check_instance(&mut report, &make(&mut rng));
    }
    report
}

// ---- f64 reference implementations ----

pub mod oracle {
    pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: Option<&[f64]>, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
        let [n, c, h, wd] = xs;
        let [o, _, kh, kw] = ws;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for ic in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let (yy, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((s * c + ic) * h + yy as usize) * wd + xx as usize] * w[((oc * c + ic) * kh + u) * kw + v];
                                }
                            }
                        }
                        y[((s * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        (y, [n, o, oh, ow])
    }

    pub fn linear(x: &[f64], n: usize, f_in: usize, w: &[f64], f_out: usize, b: Option<&[f64]>) -> Vec<f64> {
        let mut y = vec![0.0; n * f_out];
        for s in 0..n {
            for o in 0..f_out {
                y[s * f_out + o] = b.map_or(0.0, |b| b[o]) + (0..f_in).map(|i| x[s * f_in + i] * w[o * f_in + i]).sum::<f64>();
            }
        }
        y
    }

    pub fn gap(x: &[f64], hw: usize) -> Vec<f64> {
        x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
    }

    pub fn batch_norm(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut y = vec![0.0; x.len()];
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |s| ((s * c + ch) * hw)..((s * c + ch + 1) * hw));
            let mean = idx().map(|i| x[i]).sum::<f64>() / m;
            let var = idx().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            for i in idx() {
                y[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
            }
        }
        y
    }

    pub fn softmax_ce(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
        let mut loss = 0.0;
        for (row, &l) in logits.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() - (row[l] - max);
        }
        loss / labels.len() as f64
    }

    /// `s[n, c]` multiplies plane `(n, c)`.
    pub fn reweigh(x: &[f64], hw: usize, s: &[f64]) -> Vec<f64> {
        x.chunks(hw).zip(s).flat_map(|(p, &sc)| p.iter().map(move |v| v * sc)).collect()
    }

    /// `sum(r * y) / rows`, the reduction the tape side builds from `mul`,
    /// `gap` and `select_mean`.
    pub fn reduce(y: &[f64], r: &[f64], rows: usize, per_row_norm: usize) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (rows * per_row_norm) as f64
    }
}

// ---- tape-side helpers ----

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Scalar `sum(r * y) / (N * H * W)` (4-d) or `sum(r * y) / N` (2-d).
fn reduce(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let r = g.input(r.clone());
    let p = g.mul(y, r).unwrap();
    let p = if g.shape(p).len() == 4 { g.gap(p).unwrap() } else { p };
    let cols: Vec<usize> = (0..g.shape(p)[1]).collect();
    g.select_mean(p, &cols).unwrap()
}

fn leaves(g: &mut Graph, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| g.leaf(t.clone())).collect()
}

fn grads_of(g: &mut Graph, root: Var, vars: &[Var]) -> Vec<Vec<f32>> {
    let grads = g.backward(root).unwrap();
    vars.iter()
        .map(|&v| grads.wrt(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

// ---- cases ----

pub fn conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..3);
    let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
    // a spatial size the kernel tiles exactly
    let out = rng.random_range(2..4);
    let h = (out - 1) * stride + k - 2 * pad;
    let xs = [n, c, h, h];
    let ws = [o, c, k, k];
    let inputs = vec![
        rand_tensor(rng, &xs, -1.0, 1.0),
        rand_tensor(rng, &ws, -1.0, 1.0),
        rand_tensor(rng, &[o], -1.0, 1.0),
    ];
    let (_, ys) = oracle::conv2d(&f64s(&inputs[0]), xs, &f64s(&inputs[1]), ws, None, stride, pad);
    let r = rand_tensor(rng, &ys, -1.0, 1.0);
    let r64 = f64s(&r);
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            let l = reduce(&mut g, y, &r);
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| {
            let (y, ys) = oracle::conv2d(&t[0], xs, &t[1], ws, Some(&t[2]), stride, pad);
            oracle::reduce(&y, &r64, ys[0], ys[2] * ys[3])
        }),
    }
}

pub fn linear(rng: &mut ChaCha8Rng) -> Instance {
    let (n, fi, fo) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let inputs = vec![
        rand_tensor(rng, &[n, fi], -1.0, 1.0),
        rand_tensor(rng, &[fo, fi], -1.0, 1.0),
        rand_tensor(rng, &[fo], -1.0, 1.0),
    ];
    let r = rand_tensor(rng, &[n, fo], -1.0, 1.0);
    let r64 = f64s(&r);
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let l = reduce(&mut g, y, &r);
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| {
            let y = oracle::linear(&t[0], n, fi, &t[1], fo, Some(&t[2]));
            oracle::reduce(&y, &r64, n, 1)
        }),
    }
}

fn elementwise(rng: &mut ChaCha8Rng, lo: f32, hi: f32, hs: bool) -> Instance {
    let shape = [rng.random_range(1..3), rng.random_range(1..4), 2, 3];
    let inputs = vec![rand_tensor(rng, &shape, lo, hi)];
    let r = rand_tensor(rng, &shape, -1.0, 1.0);
    let r64 = f64s(&r);
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let y = if hs { g.hard_sigmoid(v[0]) } else { g.relu(v[0]) }.unwrap();
            let l = reduce(&mut g, y, &r);
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, k| {
            let y: Vec<f64> = t[0].iter().map(|&z| if hs { k.hard_sigmoid(z) } else { k.relu(z) }).collect();
            oracle::reduce(&y, &r64, shape[0], 6)
        }),
    }
}

pub fn relu(rng: &mut ChaCha8Rng) -> Instance {
    elementwise(rng, -1.0, 1.0, false)
}

pub fn hard_sigmoid(rng: &mut ChaCha8Rng) -> Instance {
    elementwise(rng, -5.0, 5.0, true)
}

pub fn batch_norm(rng: &mut ChaCha8Rng) -> Instance {
    let xs = [rng.random_range(2..4), rng.random_range(1..4), 2, 2];
    let c = xs[1];
    let inputs = vec![
        rand_tensor(rng, &xs, -2.0, 2.0),
        rand_tensor(rng, &[c], 0.5, 1.5),
        rand_tensor(rng, &[c], -0.5, 0.5),
    ];
    let r = rand_tensor(rng, &xs, -1.0, 1.0);
    let r64 = f64s(&r);
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], BN_EPS).unwrap();
            let l = reduce(&mut g, y, &r);
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| {
            let y = oracle::batch_norm(&t[0], xs, &t[1], &t[2], BN_EPS as f64);
            oracle::reduce(&y, &r64, xs[0], 4)
        }),
    }
}

pub fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Instance {
    let (n, classes) = (rng.random_range(1..5), rng.random_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let inputs = vec![rand_tensor(rng, &[n, classes], -3.0, 3.0)];
    let l2 = labels.clone();
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let l = g.softmax_cross_entropy(v[0], &labels).unwrap();
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| oracle::softmax_ce(&t[0], classes, &l2)),
    }
}

/// `gap`, `reweigh`, `add`, `mul`, `scale` and `sum_scalars` in one expression:
/// `sum_scalars([reduce(add(reweigh(x, s), mul(x, y))), scale(reduce(gap-path), f)])`.
pub fn arithmetic(rng: &mut ChaCha8Rng) -> Instance {
    let xs = [rng.random_range(1..3), rng.random_range(1..4), 2, 2];
    let (n, c) = (xs[0], xs[1]);
    let factor = rng.random_range(-2.0f32..2.0);
    let inputs = vec![
        rand_tensor(rng, &xs, -1.0, 1.0),
        rand_tensor(rng, &xs, -1.0, 1.0),
        rand_tensor(rng, &[n, c], 0.0, 1.0),
    ];
    let r = rand_tensor(rng, &xs, -1.0, 1.0);
    let r2 = rand_tensor(rng, &[n, c], -1.0, 1.0);
    let (r64, r264) = (f64s(&r), f64s(&r2));
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let a = g.reweigh(v[0], v[2]).unwrap();
            let b = g.mul(v[0], v[1]).unwrap();
            let sum = g.add(a, b).unwrap();
            let l1 = reduce(&mut g, sum, &r);
            let pooled = g.gap(v[1]).unwrap();
            let l2 = reduce(&mut g, pooled, &r2);
            let l2 = g.scale(l2, factor).unwrap();
            let l = g.sum_scalars(&[l1, l2]).unwrap();
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| {
            let a = oracle::reweigh(&t[0], 4, &t[2]);
            let sum: Vec<f64> = a.iter().zip(t[0].iter().zip(&t[1])).map(|(a, (x, y))| a + x * y).collect();
            let l1 = oracle::reduce(&sum, &r64, n, 4);
            let pooled = oracle::gap(&t[1], 4);
            l1 + factor as f64 * oracle::reduce(&pooled, &r264, n, 1)
        }),
    }
}

/// `mask`, `select_mean`, `scatter_channels` and `channel_affine`.
pub fn selection(rng: &mut ChaCha8Rng) -> Instance {
    let xs = [rng.random_range(1..3), rng.random_range(2..4), 2, 2];
    let (n, c) = (xs[0], xs[1]);
    let width = c + rng.random_range(1..3);
    let mut slots: Vec<usize> = (0..width).collect();
    for i in (1..width).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let index: Vec<usize> = slots[..c].to_vec();
    let keep: Vec<bool> = (0..c).map(|i| i == 0 || rng.random_bool(0.5)).collect();
    let cols: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.6)).collect();
    let scale: Vec<f32> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let shift: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inputs = vec![rand_tensor(rng, &xs, -1.0, 1.0), rand_tensor(rng, &[n, c], 0.0, 1.0)];
    let r = rand_tensor(rng, &[n, width, 2, 2], -1.0, 1.0);
    let r64 = f64s(&r);
    let (index2, keep2, cols2, scale2, shift2) = (index.clone(), keep.clone(), cols.clone(), scale.clone(), shift.clone());
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut g = Graph::new();
            let v = leaves(&mut g, t);
            let a = g.channel_affine(v[0], &scale, &shift).unwrap();
            let wide = g.scatter_channels(a, &index, width).unwrap();
            let l1 = reduce(&mut g, wide, &r);
            let m = g.mask(v[1], &keep).unwrap();
            let l2 = g.select_mean(m, &cols).unwrap();
            let l = g.sum_scalars(&[l1, l2]).unwrap();
            grads_of(&mut g, l, &v)
        }),
        oracle: Box::new(move |t, _| {
            let mut wide = vec![0.0; n * width * 4];
            for s in 0..n {
                for ch in 0..c {
                    for p in 0..4 {
                        wide[(s * width + index2[ch]) * 4 + p] = t[0][(s * c + ch) * 4 + p] * scale2[ch] as f64 + shift2[ch] as f64;
                    }
                }
            }
            let l1 = oracle::reduce(&wide, &r64, n, 4);
            let mut l2 = 0.0;
            for s in 0..n {
                for &col in &cols2 {
                    if keep2[col] {
                        l2 += t[1][s * c + col];
                    }
                }
            }
            l1 + l2 / n as f64
        }),
    }
}

/// A full gated layer: the generator's salience reweighs conv, batch norm
/// and relu outputs; the objective adds a shrinking term on selected columns.
pub fn generator_path(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..4);
    let c_in = rng.random_range(2..6);
    let c_out = rng.random_range(2..5);
    let (k, stride, pad, h) = (3, 1, 1, 3);
    let lambda = rng.random_range(0.5f32..2.0);
    let template = SalienceGenerator::new(c_in, c_out, rng);
    let hidden = template.fc1.f_out();
    let xs = [n, c_in, h, h];
    let ws = [c_out, c_in, k, k];
    let inputs = vec![
        rand_tensor(rng, &xs, -2.0, 2.0),
        rand_tensor(rng, &ws, -0.5, 0.5),
        rand_tensor(rng, &[c_out], -0.5, 0.5),
        rand_tensor(rng, &[c_out], 0.5, 1.5),
        rand_tensor(rng, &[c_out], -0.5, 0.5),
        rand_tensor(rng, &[hidden, c_in], -2.0, 2.0),
        rand_tensor(rng, &[hidden], -1.0, 1.0),
        rand_tensor(rng, &[c_out, hidden], -3.0, 3.0),
        rand_tensor(rng, &[c_out], -1.0, 1.0),
    ];
    let selection: Vec<usize> = (0..c_out).filter(|_| rng.random_bool(0.5)).collect();
    let r = rand_tensor(rng, &[n, c_out, h, h], -1.0, 1.0);
    let r64 = f64s(&r);
    let sel2 = selection.clone();
    Instance {
        inputs,
        analytic: Box::new(move |t| {
            let mut block = ConvBlock::new(c_in, c_out, k, stride, pad, true, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(0));
            block.weight = t[1].clone();
            block.bias = t[2].clone();
            let bn = block.bn.as_mut().unwrap();
            bn.gamma = t[3].clone();
            bn.beta = t[4].clone();
            let mut gen = template.clone();
            gen.fc1.weight = t[5].clone();
            gen.fc1.bias = t[6].clone();
            gen.fc2.weight = t[7].clone();
            gen.fc2.bias = t[8].clone();

            let mut g = Graph::new();
            let x = g.leaf(t[0].clone());
            let s = gen.forward(&mut g, x).unwrap();
            let y = block.infer(&mut g, x, Mode::BatchStats).unwrap();
            let out = g.reweigh(y, s).unwrap();
            let task = reduce(&mut g, out, &r);
            let shrink = g.select_mean(s, &selection).unwrap();
            let shrink = g.scale(shrink, lambda).unwrap();
            let l = g.sum_scalars(&[task, shrink]).unwrap();
            let grads = g.backward(l).unwrap();
            let gx = grads.wrt(x).unwrap().to_vec();
            let bn = block.bn.as_mut().unwrap();
            let mut params = [&mut block.weight, &mut block.bias];
            let mut bnp = [&mut bn.gamma, &mut bn.beta];
            let mut genp = [&mut gen.fc1.weight, &mut gen.fc1.bias, &mut gen.fc2.weight, &mut gen.fc2.bias];
            let mut out = vec![gx];
            for p in params.iter_mut().chain(bnp.iter_mut()).chain(genp.iter_mut()) {
                grads.accumulate(p);
                out.push(p.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()]));
            }
            out
        }),
        oracle: Box::new(move |t, kinks| {
            let pooled = oracle::gap(&t[0], h * h);
            let z1 = oracle::linear(&pooled, n, c_in, &t[5], hidden, Some(&t[6]));
            let a1: Vec<f64> = z1.iter().map(|&z| kinks.relu(z)).collect();
            let z2 = oracle::linear(&a1, n, hidden, &t[7], c_out, Some(&t[8]));
            let s: Vec<f64> = z2.iter().map(|&z| kinks.hard_sigmoid(z)).collect();
            let (y, ys) = oracle::conv2d(&t[0], xs, &t[1], ws, Some(&t[2]), stride, pad);
            let y = oracle::batch_norm(&y, ys, &t[3], &t[4], BN_EPS as f64);
            let y: Vec<f64> = y.iter().map(|&v| kinks.relu(v)).collect();
            let out = oracle::reweigh(&y, h * h, &s);
            let task = oracle::reduce(&out, &r64, n, h * h);
            let shrink: f64 = (0..n).map(|i| sel2.iter().map(|&c| s[i * c_out + c]).sum::<f64>()).sum::<f64>() / n as f64;
            task + lambda as f64 * shrink
        }),
    }
}

pub fn all_cases() -> Vec<CaseReport> {
    vec![
        run_case("conv2d", 1, conv2d),
        run_case("linear", 2, linear),
        run_case("relu", 3, relu),
        run_case("hard_sigmoid", 4, hard_sigmoid),
        run_case("batch_norm", 5, batch_norm),
        run_case("softmax_cross_entropy", 6, softmax_cross_entropy),
        run_case("gap/reweigh/add/mul/scale/sum", 7, arithmetic),
        run_case("mask/select_mean/scatter/affine", 8, selection),
        run_case("generator path", 9, generator_path),
    ]
}
