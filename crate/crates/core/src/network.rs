//! Salience-gated CNNs assembled from an [`ArchSpec`].
//!
//! Every conv layer is a [`PcsLayer`]: a conv block whose output is multiplied
//! per channel by the salience its generator computes from the layer input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cost::graph::{GraphNode, InputSpec, NetGraph, INPUT};
use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, prefixed_param, Activation, BatchStats, ConvBlock, Linear, Mode, State};
use crate::optim::Parameters;
use crate::salience::{truncate_columns, SalienceGenerator};
use crate::shrinking::SalienceState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageSpec {
    /// Conv, BN, ReLU; padding defaults to `kernel / 2`.
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<usize>,
    },
    /// Basic residual block: two 3x3 convs plus an identity or 1x1 projection shortcut.
    Residual { out: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub classes: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    pub stages: Vec<StageSpec>,
}

fn yes() -> bool {
    true
}

impl ArchSpec {
    /// Six conv blocks, widths 16-32-32-64-64-64, for 32x32 inputs. The two
    /// downsampling blocks are 4x4 stride 2 so every extent divides exactly.
    pub fn toy_cnn(classes: usize) -> Self {
        let conv = |out, kernel, stride| StageSpec::Conv {
            out,
            kernel,
            stride,
            padding: Some(1),
        };
        ArchSpec {
            name: "toy-cnn".into(),
            in_channels: 3,
            classes,
            batch_norm: true,
            stages: vec![
                conv(16, 3, 1),
                conv(32, 4, 2),
                conv(32, 3, 1),
                conv(64, 4, 2),
                conv(64, 3, 1),
                conv(64, 3, 1),
            ],
        }
    }

    /// A stem conv and three basic blocks, one downsampling through a
    /// projection. Needs odd input sizes (e.g. 15x15) for the stride-2 block.
    pub fn toy_resnet(classes: usize) -> Self {
        ArchSpec {
            name: "toy-resnet".into(),
            in_channels: 3,
            classes,
            batch_norm: true,
            stages: vec![
                StageSpec::Conv {
                    out: 16,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                },
                StageSpec::Residual { out: 16, stride: 1 },
                StageSpec::Residual { out: 32, stride: 2 },
                StageSpec::Residual { out: 32, stride: 1 },
            ],
        }
    }

    pub fn builtin(name: &str, classes: usize) -> Result<Self> {
        match name {
            "toy-cnn" => Ok(Self::toy_cnn(classes)),
            "toy-resnet" => Ok(Self::toy_resnet(classes)),
            other => Err(Error::Config(format!("unknown architecture `{other}` (known: toy-cnn, toy-resnet)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 || self.stages.is_empty() {
            return Err(Error::Config(format!(
                "architecture `{}` needs input channels, at least two classes and one stage",
                self.name
            )));
        }
        for s in &self.stages {
            let (out, kernel, stride) = match *s {
                StageSpec::Conv { out, kernel, stride, .. } => (out, kernel, stride),
                StageSpec::Residual { out, stride } => (out, 3, stride),
            };
            if out < 2 || kernel == 0 || stride == 0 {
                return Err(Error::Config(format!(
                    "stage {s:?}: width must be >= 2, kernel and stride positive"
                )));
            }
        }
        Ok(())
    }

    /// Names of the gated layers in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut c_in = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            match *s {
                StageSpec::Conv { out, .. } => {
                    names.push(format!("s{i}"));
                    c_in = out;
                }
                StageSpec::Residual { out, stride } => {
                    names.push(format!("s{i}.a"));
                    names.push(format!("s{i}.b"));
                    if stride != 1 || c_in != out {
                        names.push(format!("s{i}.proj"));
                    }
                    c_in = out;
                }
            }
        }
        names
    }

    /// Cost-model description for an `h x w` input. Gated layers keep their
    /// names; the classifier is `gap` followed by `head`.
    pub fn to_graph(&self, h: usize, w: usize) -> Result<NetGraph> {
        self.validate()?;
        if h != w {
            return Err(Error::Config(format!("square inputs only, got {h}x{w}")));
        }
        let mut nodes: Vec<GraphNode> = Vec::new();
        let mut prev = INPUT.to_string();
        let (mut c_in, mut hw) = (self.in_channels, h);
        for (i, s) in self.stages.iter().enumerate() {
            match *s {
                StageSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let name = format!("s{i}");
                    let node = GraphNode::conv(&name, &prev, c_in, out, kernel, stride, padding.unwrap_or(kernel / 2), hw);
                    hw = node.out_h;
                    nodes.push(node);
                    prev = name;
                    c_in = out;
                }
                StageSpec::Residual { out, stride } => {
                    let group = format!("s{i}");
                    let a = GraphNode::conv(&format!("s{i}.a"), &prev, c_in, out, 3, stride, 1, hw);
                    let out_hw = a.out_h;
                    nodes.push(a);
                    nodes.push(GraphNode::conv(&format!("s{i}.b"), &format!("s{i}.a"), out, out, 3, 1, 1, out_hw).in_group(&group));
                    let shortcut = if stride != 1 || c_in != out {
                        let name = format!("s{i}.proj");
                        nodes.push(GraphNode::conv(&name, &prev, c_in, out, 1, stride, 0, hw).in_group(&group));
                        name
                    } else {
                        if let Some(p) = nodes.iter_mut().find(|n| n.name == prev) {
                            if p.group.is_none() {
                                p.group = Some(group.clone());
                            }
                        }
                        prev.clone()
                    };
                    let add = format!("s{i}.add");
                    nodes.push(GraphNode::add(&add, &[&format!("s{i}.b"), &shortcut], out, out_hw, &group));
                    prev = add;
                    c_in = out;
                    hw = out_hw;
                }
            }
        }
        nodes.push(GraphNode::pool("gap", &prev, c_in, hw, 1, 0, hw));
        nodes.push(GraphNode::dense("head", "gap", c_in, self.classes, true));
        let graph = NetGraph {
            name: self.name.clone(),
            input: InputSpec {
                channels: self.in_channels,
                height: h,
                width: w,
            },
            nodes,
        };
        graph.validate()?;
        for n in &graph.nodes {
            if n.kind == crate::cost::graph::NodeKind::Conv && (n.in_h + 2 * n.padding - n.kernel) % n.stride != 0 {
                return Err(Error::Config(format!(
                    "layer {} does not tile a {}x{} input exactly with kernel {} stride {} padding {}",
                    n.name, n.in_h, n.in_w, n.kernel, n.stride, n.padding
                )));
            }
        }
        Ok(graph)
    }
}

/// How a gated layer's channel scale is formed in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// The generator output `s`.
    Salience,
    /// `s` with the layer's current selection hard-zeroed.
    Truncate,
    /// `s * m`, with `m` the nonzero pattern of the running salience.
    Masked,
    /// The running salience as a constant, input-independent scale.
    Static,
}

#[derive(Debug, Clone)]
pub struct PcsLayer {
    pub name: String,
    pub block: ConvBlock,
    pub generator: SalienceGenerator,
    pub state: SalienceState,
}

impl PcsLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bn: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        PcsLayer {
            name,
            block: ConvBlock::new(c_in, c_out, kernel, stride, padding, bn, activation, rng),
            generator: SalienceGenerator::new(c_in, c_out, rng),
            state: SalienceState::new(c_out, 0, crate::shrinking::DEFAULT_ALPHA),
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.state.running().iter().map(|&v| v != 0.0).collect()
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode, gate: Gate, rec: &mut Record) -> Result<Var> {
        let n = g.shape(x)[0];
        let s = match gate {
            Gate::Static => None,
            _ => Some(self.generator.forward(g, x)?),
        };
        let (y, stats) = self.block.forward_impl(g, x, mode)?;
        let scale = match (gate, s) {
            (Gate::Salience, Some(s)) => s,
            (Gate::Truncate, Some(s)) => truncate_columns(g, s, self.state.last_selection())?,
            (Gate::Masked, Some(s)) => g.mask(s, &self.mask())?,
            _ => {
                let row = self.state.running();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                g.input(Tensor::new(vec![n, row.len()], data)?)
            }
        };
        rec.salience.push(s);
        rec.scales.push(scale);
        rec.stats.push(stats);
        g.reweigh(y, scale)
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Plain(PcsLayer),
    Residual {
        a: PcsLayer,
        b: PcsLayer,
        proj: Option<PcsLayer>,
    },
}

#[derive(Default)]
struct Record {
    salience: Vec<Option<Var>>,
    scales: Vec<Var>,
    stats: Vec<Option<BatchStats>>,
}

/// Output of [`Network::forward`]; per-layer entries follow [`Network::layers`] order.
pub struct ForwardOut {
    pub logits: Var,
    /// Generator output per layer (absent under [`Gate::Static`]).
    pub salience: Vec<Option<Var>>,
    /// The scale actually applied per layer.
    pub scales: Vec<Var>,
    stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchSpec,
    pub stages: Vec<Stage>,
    pub head: Linear,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let bn = arch.batch_norm;
        let mut c_in = arch.in_channels;
        let mut stages = Vec::with_capacity(arch.stages.len());
        for (i, s) in arch.stages.iter().enumerate() {
            match *s {
                StageSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let pad = padding.unwrap_or(kernel / 2);
                    stages.push(Stage::Plain(PcsLayer::new(format!("s{i}"), c_in, out, kernel, stride, pad, bn, Activation::Relu, rng)));
                    c_in = out;
                }
                StageSpec::Residual { out, stride } => {
                    let a = PcsLayer::new(format!("s{i}.a"), c_in, out, 3, stride, 1, bn, Activation::Relu, rng);
                    let b = PcsLayer::new(format!("s{i}.b"), out, out, 3, 1, 1, bn, Activation::None, rng);
                    let proj = (stride != 1 || c_in != out)
                        .then(|| PcsLayer::new(format!("s{i}.proj"), c_in, out, 1, stride, 0, bn, Activation::None, rng));
                    stages.push(Stage::Residual { a, b, proj });
                    c_in = out;
                }
            }
        }
        let head = Linear::new(c_in, arch.classes, rng);
        Ok(Network { arch, stages, head })
    }

    pub fn layers(&self) -> Vec<&PcsLayer> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Plain(l) => out.push(l),
                Stage::Residual { a, b, proj } => {
                    out.push(a);
                    out.push(b);
                    out.extend(proj.iter());
                }
            }
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut PcsLayer> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Plain(l) => out.push(l),
                Stage::Residual { a, b, proj } => {
                    out.push(a);
                    out.push(b);
                    out.extend(proj.iter_mut());
                }
            }
        }
        out
    }

    pub fn layer(&self, name: &str) -> Option<&PcsLayer> {
        self.layers().into_iter().find(|l| l.name == name)
    }

    /// Forward pass. In [`Mode::Train`] the caller passes the output to
    /// [`commit`](Self::commit) to update batch-norm running statistics.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, gate: Gate) -> Result<ForwardOut> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != self.arch.in_channels {
            return Err(Error::shape(
                "network_forward",
                format!("input {xs:?} for {} input channels", self.arch.in_channels),
            ));
        }
        let mut rec = Record::default();
        let mut h = x;
        for s in &self.stages {
            h = match s {
                Stage::Plain(l) => l.forward(g, h, mode, gate, &mut rec)?,
                Stage::Residual { a, b, proj } => {
                    let ya = a.forward(g, h, mode, gate, &mut rec)?;
                    let yb = b.forward(g, ya, mode, gate, &mut rec)?;
                    let sc = match proj {
                        Some(p) => p.forward(g, h, mode, gate, &mut rec)?,
                        None => h,
                    };
                    let sum = g.add(yb, sc)?;
                    g.relu(sum)?
                }
            };
        }
        let pooled = g.gap(h)?;
        let logits = self.head.forward(g, pooled)?;
        Ok(ForwardOut {
            logits,
            salience: rec.salience,
            scales: rec.scales,
            stats: rec.stats,
        })
    }

    pub fn commit(&mut self, out: ForwardOut) {
        for (layer, stats) in self.layers_mut().into_iter().zip(out.stats) {
            if let Some(stats) = stats {
                layer.block.commit(stats);
            }
        }
    }

    /// Eval-mode logits for a batch `[N, C, H, W]`.
    pub fn predict(&self, images: &Tensor, gate: Gate) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x, Mode::Eval, gate)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn to_graph(&self, h: usize, w: usize) -> Result<NetGraph> {
        self.arch.to_graph(h, w)
    }
}

impl Parameters for Network {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        for l in self.layers_mut() {
            let conv = format!("{}.conv", l.name);
            l.block.visit_params(&mut prefixed_param(&conv, f));
            let gen = format!("{}.gen", l.name);
            l.generator.visit_params(&mut prefixed_param(&gen, f));
        }
        self.head.visit_params(&mut prefixed_param("head", f));
    }
}

impl State for Network {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for l in self.layers() {
            let conv = format!("{}.conv", l.name);
            l.block.visit_state(&mut prefixed(&conv, f));
            let gen = format!("{}.gen", l.name);
            l.generator.visit_state(&mut prefixed(&gen, f));
        }
        self.head.visit_state(&mut prefixed("head", f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for l in self.layers_mut() {
            let conv = format!("{}.conv", l.name);
            l.block.visit_state_mut(&mut prefixed_mut(&conv, f));
            let gen = format!("{}.gen", l.name);
            l.generator.visit_state_mut(&mut prefixed_mut(&gen, f));
        }
        self.head.visit_state_mut(&mut prefixed_mut("head", f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::graph::NodeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn layer_names_match_graph() {
        for arch in [ArchSpec::toy_cnn(4), ArchSpec::toy_resnet(4)] {
            let net = Network::new(arch.clone(), &mut rng()).unwrap();
            let names: Vec<String> = net.layers().iter().map(|l| l.name.clone()).collect();
            assert_eq!(names, arch.layer_names());
            let g = arch.to_graph(33, 33).or_else(|_| arch.to_graph(32, 32)).unwrap();
            let convs: Vec<String> = g
                .nodes
                .iter()
                .filter(|n| n.kind == NodeKind::Conv)
                .map(|n| n.name.clone())
                .collect();
            assert_eq!(convs, names);
            for l in net.layers() {
                let node = g.node(&l.name).unwrap();
                assert_eq!((node.c_in, node.c_out, node.kernel), (l.block.c_in(), l.block.c_out(), l.block.kernel()));
            }
        }
    }

    #[test]
    fn residual_groups_tag_summands() {
        let g = ArchSpec::toy_resnet(4).to_graph(15, 15).unwrap();
        assert!(ArchSpec::toy_resnet(4).to_graph(16, 16).is_err());
        // identity shortcut pulls the stem into the first junction
        assert_eq!(g.node("s0").unwrap().group.as_deref(), Some("s1"));
        assert_eq!(g.node("s2.proj").unwrap().group.as_deref(), Some("s2"));
        assert_eq!(g.node("s2.a").unwrap().group, None);
    }

    #[test]
    fn forward_shapes_and_records() {
        for (arch, hw) in [(ArchSpec::toy_cnn(5), 32), (ArchSpec::toy_resnet(5), 15)] {
            let net = Network::new(arch, &mut rng()).unwrap();
            let x = Tensor::uniform(&[2, 3, hw, hw], -1.0, 1.0, &mut rng());
            for gate in [Gate::Salience, Gate::Truncate, Gate::Masked, Gate::Static] {
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let out = net.forward(&mut g, xv, Mode::BatchStats, gate).unwrap();
                assert_eq!(g.shape(out.logits), &[2, 5]);
                assert_eq!(out.scales.len(), net.layers().len());
                assert_eq!(out.salience.iter().all(Option::is_none), gate == Gate::Static);
            }
        }
    }

    #[test]
    fn fresh_network_static_matches_salience_gate_on_zero_input() {
        // zero input drives every generator to 0.5, the initial running salience
        let net = Network::new(ArchSpec::toy_cnn(3), &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let a = net.predict(&x, Gate::Static).unwrap();
        let b = net.predict(&x, Gate::Salience).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn train_mode_commit_updates_running_stats() {
        let mut net = Network::new(ArchSpec::toy_cnn(3), &mut rng()).unwrap();
        let x = Tensor::uniform(&[4, 3, 32, 32], -1.0, 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = net.forward(&mut g, xv, Mode::Train, Gate::Salience).unwrap();
        let before = net.layers()[0].block.bn.as_ref().unwrap().running_mean.clone();
        net.commit(out);
        assert_ne!(net.layers()[0].block.bn.as_ref().unwrap().running_mean, before);
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let mut net = Network::new(ArchSpec::toy_resnet(3), &mut rng()).unwrap();
        let x = Tensor::uniform(&[2, 3, 15, 15], -1.0, 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = net.forward(&mut g, xv, Mode::Train, Gate::Salience).unwrap();
        let loss = g.softmax_cross_entropy(out.logits, &[0, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.apply(&mut net);
        let mut missing = Vec::new();
        net.visit_params(&mut |n, t, _| {
            if t.grad.is_none() {
                missing.push(n.to_string());
            }
        });
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn bad_arch_rejected() {
        let mut arch = ArchSpec::toy_cnn(3);
        arch.stages.push(StageSpec::Conv {
            out: 8,
            kernel: 0,
            stride: 1,
            padding: None,
        });
        assert!(Network::new(arch, &mut rng()).is_err());
        assert!(ArchSpec::builtin("resnet-9000", 3).is_err());
    }
}
