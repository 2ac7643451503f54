use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name a node uses to refer to the network input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Conv,
    Linear,
    Pool,
    Add,
    ClassifierHead,
}

impl NodeKind {
    pub fn is_dense(self) -> bool {
        matches!(self, NodeKind::Linear | NodeKind::ClassifierHead)
    }

    pub fn has_weights(self) -> bool {
        matches!(self, NodeKind::Conv | NodeKind::Linear | NodeKind::ClassifierHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub in_h: usize,
    #[serde(default = "one")]
    pub in_w: usize,
    #[serde(default = "one")]
    pub out_h: usize,
    #[serde(default = "one")]
    pub out_w: usize,
    /// Residual junction this node's output is summed into (or, for `add`
    /// nodes, the junction itself).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub inputs: Vec<String>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Ordered, declarative description of a network for cost accounting and
/// mask propagation. Producers always precede their consumers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub name: String,
    pub input: InputSpec,
    pub nodes: Vec<GraphNode>,
}

impl GraphNode {
    pub fn conv(name: &str, input: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, in_hw: usize) -> Self {
        let out = (in_hw + 2 * padding - kernel) / stride + 1;
        GraphNode {
            name: name.into(),
            kind: NodeKind::Conv,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            in_h: in_hw,
            in_w: in_hw,
            out_h: out,
            out_w: out,
            group: None,
            inputs: vec![input.into()],
        }
    }

    pub fn pool(name: &str, input: &str, channels: usize, kernel: usize, stride: usize, padding: usize, in_hw: usize) -> Self {
        GraphNode {
            kind: NodeKind::Pool,
            ..GraphNode::conv(name, input, channels, channels, kernel, stride, padding, in_hw)
        }
    }

    pub fn dense(name: &str, input: &str, f_in: usize, f_out: usize, head: bool) -> Self {
        GraphNode {
            name: name.into(),
            kind: if head { NodeKind::ClassifierHead } else { NodeKind::Linear },
            c_in: f_in,
            c_out: f_out,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_h: 1,
            in_w: 1,
            out_h: 1,
            out_w: 1,
            group: None,
            inputs: vec![input.into()],
        }
    }

    pub fn add(name: &str, inputs: &[&str], channels: usize, hw: usize, group: &str) -> Self {
        GraphNode {
            name: name.into(),
            kind: NodeKind::Add,
            c_in: channels,
            c_out: channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_h: hw,
            in_w: hw,
            out_h: hw,
            out_w: hw,
            group: Some(group.into()),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn in_group(mut self, group: &str) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// Output geometry of a producer: `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl NetGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: NetGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn node(&self, name: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect()
    }

    pub fn producer_extent(&self, name: &str) -> Option<Extent> {
        if name == INPUT {
            return Some(Extent {
                channels: self.input.channels,
                h: self.input.height,
                w: self.input.width,
            });
        }
        self.node(name).map(|n| Extent {
            channels: n.c_out,
            h: n.out_h,
            w: n.out_w,
        })
    }

    pub fn count(&self, pred: impl Fn(NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(n.kind)).count()
    }

    /// Checks wiring, channel agreement, and spatial arithmetic along every edge.
    pub fn validate(&self) -> Result<()> {
        let err = |node: &GraphNode, detail: String| Error::Graph {
            node: node.name.clone(),
            detail,
        };
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut group_width: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.name.is_empty() || n.name == INPUT {
                return Err(err(n, "reserved or empty node name".into()));
            }
            if seen.insert(&n.name, i).is_some() {
                return Err(err(n, "duplicate node name".into()));
            }
            if [n.c_in, n.c_out, n.kernel, n.stride, n.in_h, n.in_w, n.out_h, n.out_w]
                .contains(&0)
            {
                return Err(err(n, "all extents must be positive".into()));
            }
            if n.inputs.is_empty() {
                return Err(err(n, "node has no inputs".into()));
            }
            let mut extents = Vec::with_capacity(n.inputs.len());
            for p in &n.inputs {
                if p != INPUT && !seen.contains_key(p.as_str()) || p == &n.name {
                    return Err(err(n, format!("input `{p}` is not an earlier node")));
                }
                extents.push(self.producer_extent(p).expect("checked above"));
            }
            match n.kind {
                NodeKind::Conv | NodeKind::Pool => {
                    if n.inputs.len() != 1 {
                        return Err(err(n, "expects exactly one input".into()));
                    }
                    let e = extents[0];
                    if e.channels != n.c_in {
                        return Err(err(n, format!("c_in {} but producer has {} channels", n.c_in, e.channels)));
                    }
                    if (e.h, e.w) != (n.in_h, n.in_w) {
                        return Err(err(n, format!("input {}x{} but producer emits {}x{}", n.in_h, n.in_w, e.h, e.w)));
                    }
                    if n.kind == NodeKind::Pool && n.c_in != n.c_out {
                        return Err(err(n, "pooling cannot change the channel count".into()));
                    }
                    for (len, out) in [(n.in_h, n.out_h), (n.in_w, n.out_w)] {
                        let padded = len + 2 * n.padding;
                        if padded < n.kernel || (padded - n.kernel) / n.stride + 1 != out
                        {
                            return Err(err(n, format!(
                                "spatial extent {len} with kernel {} stride {} padding {} does not give {out}",
                                n.kernel, n.stride, n.padding
                            )));
                        }
                    }
                }
                NodeKind::Linear | NodeKind::ClassifierHead => {
                    if n.inputs.len() != 1 {
                        return Err(err(n, "expects exactly one input".into()));
                    }
                    let e = extents[0];
                    if e.channels * e.h * e.w != n.c_in {
                        return Err(err(n, format!(
                            "c_in {} but producer flattens to {}",
                            n.c_in,
                            e.channels * e.h * e.w
                        )));
                    }
                    if (n.out_h, n.out_w) != (1, 1) {
                        return Err(err(n, "dense layers have 1x1 output".into()));
                    }
                }
                NodeKind::Add => {
                    if n.inputs.len() < 2 {
                        return Err(err(n, "add needs at least two inputs".into()));
                    }
                    if n.group.is_none() {
                        return Err(err(n, "add node must name its residual group".into()));
                    }
                    for e in &extents {
                        if (e.channels, e.h, e.w) != (n.c_out, n.out_h, n.out_w) || n.c_in != n.c_out {
                            return Err(err(n, format!(
                                "summand {}x{}x{} does not match {}x{}x{}",
                                e.channels, e.h, e.w, n.c_out, n.out_h, n.out_w
                            )));
                        }
                    }
                }
            }
            if let Some(group) = &n.group {
                if n.kind != NodeKind::Conv && n.kind != NodeKind::Add {
                    return Err(err(n, "only conv and add nodes join residual groups".into()));
                }
                let width = *group_width.entry(group).or_insert(n.c_out);
                if width != n.c_out {
                    return Err(err(n, format!(
                        "residual group `{group}` has width {width} but this member reports {}",
                        n.c_out
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Names accepted by [`builtin_graph`].
pub const BUILTINS: [&str; 4] = ["resnet18", "resnet34", "vgg16", "toy-cnn"];

pub fn builtin_graph(name: &str) -> Result<NetGraph> {
    match name {
        "resnet18" => Ok(resnet("resnet18", &[2, 2, 2, 2])),
        "resnet34" => Ok(resnet("resnet34", &[3, 4, 6, 3])),
        "vgg16" => Ok(vgg16()),
        "toy-cnn" => crate::network::ArchSpec::toy_cnn(10).to_graph(32, 32),
        other => Err(Error::Config(format!(
            "unknown builtin graph `{other}` (known: {})",
            BUILTINS.join(", ")
        ))),
    }
}

/// ImageNet ResNet with basic blocks at 224x224.
fn resnet(name: &str, blocks: &[usize; 4]) -> NetGraph {
    let mut nodes = vec![GraphNode::conv("conv1", INPUT, 3, 64, 7, 2, 3, 224).in_group("layer1.0")];
    nodes.push(GraphNode::pool("maxpool", "conv1", 64, 3, 2, 1, 112));
    let mut prev = "maxpool".to_string();
    let (mut c_in, mut hw) = (64usize, 56usize);
    for (stage, (&count, width)) in blocks.iter().zip([64usize, 128, 256, 512]).enumerate() {
        for b in 0..count {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", stage + 1);
            let out_hw = hw / stride;
            nodes.push(GraphNode::conv(&format!("{p}.conv1"), &prev, c_in, width, 3, stride, 1, hw));
            nodes.push(
                GraphNode::conv(&format!("{p}.conv2"), &format!("{p}.conv1"), width, width, 3, 1, 1, out_hw)
                    .in_group(&p),
            );
            let shortcut = if stride != 1 || c_in != width {
                let ds = format!("{p}.downsample");
                nodes.push(GraphNode::conv(&ds, &prev, c_in, width, 1, stride, 0, hw).in_group(&p));
                ds
            } else {
                prev.clone()
            };
            let add = format!("{p}.add");
            nodes.push(GraphNode::add(&add, &[&format!("{p}.conv2"), &shortcut], width, out_hw, &p));
            prev = add;
            c_in = width;
            hw = out_hw;
        }
    }
    nodes.push(GraphNode::pool("avgpool", &prev, 512, 7, 1, 0, 7));
    nodes.push(GraphNode::dense("fc", "avgpool", 512, 1000, true));
    NetGraph {
        name: name.into(),
        input: InputSpec {
            channels: 3,
            height: 224,
            width: 224,
        },
        nodes,
    }
}

fn vgg16() -> NetGraph {
    const CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut nodes = Vec::new();
    let mut prev = INPUT.to_string();
    let (mut c_in, mut hw) = (3usize, 224usize);
    let (mut conv_i, mut pool_i) = (1, 1);
    for width in CFG {
        if width == 0 {
            let name = format!("pool{pool_i}");
            nodes.push(GraphNode::pool(&name, &prev, c_in, 2, 2, 0, hw));
            hw /= 2;
            pool_i += 1;
            prev = name;
        } else {
            let name = format!("conv{conv_i}");
            nodes.push(GraphNode::conv(&name, &prev, c_in, width, 3, 1, 1, hw));
            conv_i += 1;
            c_in = width;
            prev = name;
        }
    }
    nodes.push(GraphNode::dense("fc6", &prev, 512 * 7 * 7, 4096, false));
    nodes.push(GraphNode::dense("fc7", "fc6", 4096, 4096, false));
    nodes.push(GraphNode::dense("fc8", "fc7", 4096, 1000, true));
    NetGraph {
        name: "vgg16".into(),
        input: InputSpec {
            channels: 3,
            height: 224,
            width: 224,
        },
        nodes,
    }
}
