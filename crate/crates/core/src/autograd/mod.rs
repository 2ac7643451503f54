//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once from the back. A graph can be
//! differentiated exactly once.

mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::optim::Parameters;
use crate::tensor::Tensor;

pub(crate) use kernels::{gemm, MatRef};
use kernels::{col2im, im2col, ConvGeom};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Gap(Var),
    HardSigmoid(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Vec<Var>),
    Reweigh {
        x: Var,
        s: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Mask {
        x: Var,
        keep: Vec<f32>,
    },
    SelectMean {
        s: Var,
        cols: Vec<usize>,
    },
    Scatter {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Address of the bound parameter tensor, if this leaf is one.
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of a backward pass: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `t` (if it was bound with
    /// [`Graph::param`]) into its gradient buffer.
    pub fn accumulate(&self, t: &mut Tensor) {
        let key = t as *const Tensor as usize;
        if let Some(nodes) = self.params.get(&key) {
            for &n in nodes {
                if let Some(g) = &self.grads[n] {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    /// Accumulates into every parameter of `model`.
    pub fn apply(&self, model: &mut dyn Parameters) {
        model.visit_params(&mut |_, t, _| self.accumulate(t));
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked but not tied to a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter tensor. Its gradient is routed back by
    /// [`Gradients::accumulate`], so the tensor must stay in place until then.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("tensor invariants hold");
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(t as *const Tensor as usize);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} for {c_out} output channels", self.shape(b)),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let extent = |len: usize| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < kh || !(padded - kh).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "conv2d output extent ({len}+2*{padding}-{kh})/{stride}+1 is not a positive integer"
                )));
            }
            Ok((padded - kh) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k: kh,
            stride,
            padding,
            h_out: extent(h)?,
            w_out: extent(wd)?,
        };
        let rows = geom.col_rows();
        let cols = geom.col_cols();
        let mut out = vec![0.0f32; n * c_out * cols];
        let mut col = vec![0.0f32; rows * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..n {
                im2col(&xv[s * c_in * h * wd..(s + 1) * c_in * h * wd], &geom, &mut col);
                let dst = &mut out[s * c_out * cols..(s + 1) * c_out * cols];
                if let Some(bv) = bv {
                    for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                        chunk.fill(bv[o]);
                    }
                }
                gemm(
                    MatRef::row_major(wv, c_out, rows),
                    MatRef::row_major(&col, rows, cols),
                    if bv.is_some() { 1.0 } else { 0.0 },
                    dst,
                );
            }
        }
        check_finite("conv2d", &out)?;
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [f_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} for {f_out} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0f32; n * f_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(f_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::row_major(self.value(x).data(), n, f_in),
            MatRef::transposed(self.value(w).data(), f_in, f_out),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        check_finite("linear", &out)?;
        let value = Tensor::new(vec![n, f_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    /// `clamp((x + 3) / 6, 0, 1)`.
    pub fn hard_sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| hard_sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::HardSigmoid(x), rg))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("gap", format!("expected 4-d input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = 1.0 / hw as f32;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f32>() * inv)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gap(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let classes = ls[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0f32; ls[0] * classes];
        let mut loss = 0.0f32;
        for (i, row) in self.value(logits).data().chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let p = &mut probs[i * classes..(i + 1) * classes];
            let mut z = 0.0f32;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            loss += z.ln() - (row[labels[i]] - max);
        }
        loss /= ls[0] as f32;
        check_finite("softmax_cross_entropy", &[loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &data)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &data)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &data)?;
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0f32;
        for &t in terms {
            if !self.value(t).is_scalar() {
                return Err(Error::shape(
                    "sum_scalars",
                    format!("term of shape {:?}", self.shape(t)),
                ));
            }
            total += self.value(t).item();
        }
        check_finite("sum_scalars", &[total])?;
        let rg = self.rg(terms);
        Ok(self.push(Tensor::scalar(total), Op::Sum(terms.to_vec()), rg))
    }

    /// Scales channel `c` of sample `n` by `s[n, c]`.
    pub fn reweigh(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() != 4 || ss != [xs[0], xs[1]] {
            return Err(Error::shape(
                "reweigh",
                format!("features {xs:?} with salience {ss:?}"),
            ));
        }
        let hw = xs[2] * xs[3];
        let sv = self.value(s).data();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(plane, &sc)| plane.iter().map(move |v| v * sc))
            .collect();
        check_finite("reweigh", &data)?;
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::Reweigh { x, s }, rg))
    }

    /// Fixed per-channel affine map on `[N, C, H, W]`; only `x` is differentiated.
    pub fn channel_affine(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || scale.len() != xs[1] || shift.len() != xs[1] {
            return Err(Error::shape(
                "channel_affine",
                format!("features {xs:?} with {} scales", scale.len()),
            ));
        }
        let c = xs[1];
        let hw = xs[2] * xs[3];
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(i, plane)| {
                let (a, b) = (scale[i % c], shift[i % c]);
                plane.iter().map(move |v| v * a + b)
            })
            .collect();
        check_finite("channel_affine", &data)?;
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Batch-statistics normalization. Returns the output with the batch mean and
    /// biased variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "features {xs:?} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = (n * hw) as f32;
        let xv = self.value(x).data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f32;
            for s in 0..n {
                acc += xv[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f32>();
            }
            mean[ch] = acc / m;
            let mut sq = 0.0f32;
            for s in 0..n {
                sq += xv[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f32>();
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for (i, plane) in xv.chunks(hw).enumerate() {
            let ch = i % c;
            for (j, v) in plane.iter().enumerate() {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat[i * hw + j] = h;
                out[i * hw + j] = gv[ch] * h + bv[ch];
            }
        }
        check_finite("batch_norm", &out)?;
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Multiplies by a fixed 0/1 pattern. `keep` either matches the full shape
    /// or the trailing extent of a 2-d input (broadcast over rows).
    pub fn mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let numel = self.value(x).numel();
        let full: Vec<f32> = if keep.len() == numel {
            keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
        } else if xs.len() == 2 && keep.len() == xs[1] {
            (0..numel)
                .map(|i| if keep[i % xs[1]] { 1.0 } else { 0.0 })
                .collect()
        } else {
            return Err(Error::shape(
                "mask",
                format!("mask of length {} for {xs:?}", keep.len()),
            ));
        };
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&full)
            .map(|(v, k)| if *k == 0.0 { 0.0 } else { *v })
            .collect();
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mask { x, keep: full }, rg))
    }

    /// `(1/N) * sum_n sum_{c in cols} s[n, c]` for `s` of shape `[N, C]`.
    pub fn select_mean(&mut self, s: Var, cols: &[usize]) -> Result<Var> {
        let ss = self.shape(s).to_vec();
        if ss.len() != 2 {
            return Err(Error::shape("select_mean", format!("expected [N, C], got {ss:?}")));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= ss[1]) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: ss[1],
            });
        }
        let mut total = 0.0f32;
        for row in self.value(s).data().chunks(ss[1]) {
            for &c in cols {
                total += row[c];
            }
        }
        total /= ss[0] as f32;
        let rg = self.rg(&[s]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SelectMean {
                s,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Places the channels of `x` at positions `index` of a zero tensor with
    /// `width` channels.
    pub fn scatter_channels(&mut self, x: Var, index: &[usize], width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || index.len() != xs[1] || index.iter().any(|&i| i >= width) {
            return Err(Error::shape(
                "scatter_channels",
                format!("{xs:?} into width {width} via {index:?}"),
            ));
        }
        let hw = xs[2] * xs[3];
        let mut out = vec![0.0f32; xs[0] * width * hw];
        for (i, plane) in self.value(x).data().chunks(hw).enumerate() {
            let (s, c) = (i / xs[1], i % xs[1]);
            let dst = (s * width + index[c]) * hw;
            out[dst..dst + hw].copy_from_slice(plane);
        }
        let value = Tensor::new(vec![xs[0], width, xs[2], xs[3]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Scatter {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Differentiates the scalar `root`. Consumes the graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        let mut params: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(addr) = n.param {
                params.entry(addr).or_default().push(i);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let n = xs[0];
                let c_out = self.shape(*w)[0];
                let rows = geom.col_rows();
                let cols = geom.col_cols();
                let in_len = geom.c_in * geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut col = vec![0.0f32; rows * cols];
                let mut dw = vec![0.0f32; c_out * rows];
                let mut dx = if wants(x) { Some(vec![0.0f32; n * in_len]) } else { None };
                for s in 0..n {
                    let gy = &gout[s * c_out * cols..(s + 1) * c_out * cols];
                    if wants(w) {
                        im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut col);
                        gemm(
                            MatRef::row_major(gy, c_out, cols),
                            MatRef::transposed(&col, cols, rows),
                            1.0,
                            &mut dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            MatRef::transposed(wv, rows, c_out),
                            MatRef::row_major(gy, c_out, cols),
                            0.0,
                            &mut col,
                        );
                        col2im(&col, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if wants(w) {
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(b) = b.filter(|b| wants(b)) {
                    let mut db = vec![0.0f32; c_out];
                    for (k, chunk) in gout.chunks(cols).enumerate() {
                        db[k % c_out] += chunk.iter().sum::<f32>();
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f_in) = (xs[0], xs[1]);
                let f_out = self.shape(*w)[0];
                if wants(w) {
                    let mut dw = vec![0.0f32; f_out * f_in];
                    gemm(
                        MatRef::transposed(gout, f_out, n),
                        MatRef::row_major(self.value(*x).data(), n, f_in),
                        0.0,
                        &mut dw,
                    );
                    add_into(&mut grads[w.0], &dw);
                }
                if wants(x) {
                    let mut dx = vec![0.0f32; n * f_in];
                    gemm(
                        MatRef::row_major(gout, n, f_out),
                        MatRef::row_major(self.value(*w).data(), f_out, f_in),
                        0.0,
                        &mut dx,
                    );
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(b) = b.filter(|b| wants(b)) {
                    let mut db = vec![0.0f32; f_out];
                    for row in gout.chunks(f_out) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Relu(x) => {
                let g: Vec<f32> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::HardSigmoid(x) => {
                let g: Vec<f32> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| {
                        if *v > -3.0 && *v < 3.0 {
                            g / 6.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Gap(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f32;
                let g: Vec<f32> = gout
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g * inv, hw))
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = gout[0] / labels.len() as f32;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * classes + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                add_into(&mut grads[logits.0], &g);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a.0], gout);
                }
                if wants(b) {
                    add_into(&mut grads[b.0], gout);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let g: Vec<f32> = gout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    add_into(&mut grads[a.0], &g);
                }
                if wants(b) {
                    let g: Vec<f32> = gout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale(x, f) => {
                let g: Vec<f32> = gout.iter().map(|g| g * f).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Sum(terms) => {
                for t in terms.iter().filter(|t| wants(t)) {
                    add_into(&mut grads[t.0], gout);
                }
            }
            Op::Reweigh { x, s } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                if wants(x) {
                    let sv = self.value(*s).data();
                    let g: Vec<f32> = gout
                        .chunks(hw)
                        .zip(sv)
                        .flat_map(|(plane, &sc)| plane.iter().map(move |g| g * sc))
                        .collect();
                    add_into(&mut grads[x.0], &g);
                }
                if wants(s) {
                    let g: Vec<f32> = gout
                        .chunks(hw)
                        .zip(self.value(*x).data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    add_into(&mut grads[s.0], &g);
                }
            }
            Op::ChannelAffine { x, scale } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let g: Vec<f32> = gout
                    .chunks(hw)
                    .enumerate()
                    .flat_map(|(i, plane)| {
                        let a = scale[i % c];
                        plane.iter().map(move |g| g * a)
                    })
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f32;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for (i, (gp, hp)) in gout.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = i % c;
                    dbeta[ch] += gp.iter().sum::<f32>();
                    dgamma[ch] += gp.iter().zip(hp).map(|(g, h)| g * h).sum::<f32>();
                }
                if wants(x) {
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![0.0f32; gout.len()];
                    for (i, (gp, hp)) in gout.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        let ch = i % c;
                        let k = gv[ch] * inv_std[ch] / m;
                        for j in 0..hw {
                            dx[i * hw + j] = k * (m * gp[j] - dbeta[ch] - hp[j] * dgamma[ch]);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if wants(gamma) {
                    add_into(&mut grads[gamma.0], &dgamma);
                }
                if wants(beta) {
                    add_into(&mut grads[beta.0], &dbeta);
                }
            }
            Op::Mask { x, keep } => {
                let g: Vec<f32> = gout.iter().zip(keep).map(|(g, k)| g * k).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::SelectMean { s, cols } => {
                let ss = self.shape(*s);
                let (n, c) = (ss[0], ss[1]);
                let share = gout[0] / n as f32;
                let mut g = vec![0.0f32; n * c];
                for row in g.chunks_mut(c) {
                    for &col in cols {
                        row[col] += share;
                    }
                }
                add_into(&mut grads[s.0], &g);
            }
            Op::Scatter { x, index } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let width = node.value.dim(1);
                let mut g = vec![0.0f32; self.value(*x).numel()];
                for (i, plane) in g.chunks_mut(hw).enumerate() {
                    let (s, c) = (i / xs[1], i % xs[1]);
                    let src = (s * width + index[c]) * hw;
                    plane.copy_from_slice(&gout[src..src + hw]);
                }
                add_into(&mut grads[x.0], &g);
            }
        }
        Ok(())
    }
}

pub fn hard_sigmoid(v: f32) -> f32 {
    ((v + 3.0) / 6.0).clamp(0.0, 1.0)
}
