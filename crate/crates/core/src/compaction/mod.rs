//! Turns a trained gated network into a plain, physically smaller one.

pub mod plan;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{ArchSpec, Network, PcsLayer, Stage};
use crate::nn::{prefixed, prefixed_mut, ConvBlock, Linear, Mode, State};
use crate::salience::SalienceGenerator;
use crate::tensor::Tensor;

pub use plan::{make_mask, propagate_masks, ChannelMask, LayerPlan, PlanReport, PrunePlan};

/// What happens to the salience generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Generators removed; the running salience of kept channels is baked into the filters.
    #[default]
    Static,
    /// Generators kept and gathered to the surviving channels.
    Dynamic,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ScaleMode::Static),
            "dynamic" => Ok(ScaleMode::Dynamic),
            other => Err(Error::Config(format!("unknown scale mode `{other}` (static|dynamic)"))),
        }
    }
}

fn check_mask(what: &str, mask: &ChannelMask, len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(Error::shape(
            "prune_conv",
            format!("{what} mask of length {} for {len} channels", mask.len()),
        ));
    }
    if mask.kept_count() == 0 {
        return Err(Error::shape("prune_conv", format!("{what} mask keeps nothing")));
    }
    Ok(())
}

/// Gathers kept output filters and kept input columns. Values are copied, never recomputed.
pub fn prune_conv(block: &ConvBlock, out_mask: &ChannelMask, in_mask: &ChannelMask) -> Result<ConvBlock> {
    check_mask("output", out_mask, block.c_out())?;
    check_mask("input", in_mask, block.c_in())?;
    gather_conv(block, &out_mask.kept(), &in_mask.kept())
}

fn gather_conv(block: &ConvBlock, out_keep: &[usize], in_keep: &[usize]) -> Result<ConvBlock> {
    Ok(ConvBlock {
        weight: block.weight.gather(0, out_keep)?.gather(1, in_keep)?,
        bias: block.bias.gather(0, out_keep)?,
        bn: block.bn.as_ref().map(|bn| bn.gather(out_keep)).transpose()?,
        activation: block.activation,
        stride: block.stride,
        padding: block.padding,
    })
}

/// Masks from each layer's running salience (`running > epsilon`).
pub fn network_masks(net: &Network, epsilon: f32) -> Result<BTreeMap<String, ChannelMask>> {
    net.layers()
        .into_iter()
        .map(|l| Ok((l.name.clone(), make_mask(&l.name, l.state.running(), epsilon)?)))
        .collect()
}

/// Plan for `net` at spatial size `hw`, from its running salience.
pub fn plan_for(net: &Network, hw: usize, epsilon: f32) -> Result<PrunePlan> {
    propagate_masks(&net.to_graph(hw, hw)?, &network_masks(net, epsilon)?)
}

#[derive(Debug, Clone)]
pub struct CompactLayer {
    pub name: String,
    pub block: ConvBlock,
    pub generator: Option<SalienceGenerator>,
    /// Kept channel positions inside the full-width layout, when scattering.
    pub scatter: Option<(Vec<usize>, usize)>,
}

/// Structural metadata needed to rebuild a compacted layer from tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactLayerMeta {
    pub name: String,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub generator: bool,
    pub scatter: Option<(Vec<usize>, usize)>,
}

impl CompactLayer {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = self.block.infer(g, x, Mode::Eval)?;
        if let Some(gen) = &self.generator {
            let s = gen.forward(g, x)?;
            y = g.reweigh(y, s)?;
        }
        if let Some((index, width)) = &self.scatter {
            y = g.scatter_channels(y, index, *width)?;
        }
        Ok(y)
    }

    pub fn meta(&self) -> CompactLayerMeta {
        CompactLayerMeta {
            name: self.name.clone(),
            stride: self.block.stride,
            padding: self.block.padding,
            relu: self.block.activation == crate::nn::Activation::Relu,
            generator: self.generator.is_some(),
            scatter: self.scatter.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CompactStage {
    Plain(CompactLayer),
    Residual {
        a: CompactLayer,
        b: CompactLayer,
        proj: Option<CompactLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct CompactNetwork {
    pub arch: ArchSpec,
    pub mode: ScaleMode,
    pub stages: Vec<CompactStage>,
    pub head: Linear,
}

fn compact_layer(layer: &PcsLayer, plan: &PrunePlan, mode: ScaleMode) -> Result<CompactLayer> {
    let lp = plan
        .layer(&layer.name)
        .ok_or_else(|| Error::Plan(format!("plan has no entry for layer `{}`", layer.name)))?;
    if lp.c_out != layer.block.c_out() || lp.c_in != layer.block.c_in() {
        return Err(Error::Plan(format!(
            "plan entry for `{}` is {}->{} but the layer is {}->{}",
            layer.name,
            lp.c_in,
            lp.c_out,
            layer.block.c_in(),
            layer.block.c_out()
        )));
    }
    let folded = match layer.block.bn {
        Some(_) => layer.block.fold_batchnorm()?,
        None => layer.block.clone(),
    };
    let mut block = gather_conv(&folded, &lp.out_keep, &lp.in_keep)?;
    let generator = match mode {
        ScaleMode::Static => {
            // s >= 0 commutes with ReLU, so the scale folds into weight and bias
            let running = layer.state.running();
            let per_out = block.weight.numel() / block.c_out();
            for (i, &c) in lp.out_keep.iter().enumerate() {
                let s = running[c];
                block.weight.data_mut()[i * per_out..(i + 1) * per_out]
                    .iter_mut()
                    .for_each(|w| *w *= s);
                block.bias.data_mut()[i] *= s;
            }
            None
        }
        ScaleMode::Dynamic => Some(layer.generator.gather(&lp.in_keep, &lp.out_keep)?),
    };
    Ok(CompactLayer {
        name: layer.name.clone(),
        block,
        generator,
        scatter: lp.scatter.then(|| (lp.out_keep.clone(), lp.c_out)),
    })
}

/// Applies `plan` to `net`. The result matches the masked original evaluated
/// with [`Gate::Static`](crate::network::Gate::Static) (static mode) or
/// [`Gate::Masked`](crate::network::Gate::Masked) (dynamic mode).
pub fn compact_network(net: &Network, plan: &PrunePlan, mode: ScaleMode) -> Result<CompactNetwork> {
    let stages = net
        .stages
        .iter()
        .map(|s| {
            Ok(match s {
                Stage::Plain(l) => CompactStage::Plain(compact_layer(l, plan, mode)?),
                Stage::Residual { a, b, proj } => CompactStage::Residual {
                    a: compact_layer(a, plan, mode)?,
                    b: compact_layer(b, plan, mode)?,
                    proj: proj.as_ref().map(|p| compact_layer(p, plan, mode)).transpose()?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head_plan = plan
        .layer("head")
        .ok_or_else(|| Error::Plan("plan has no entry for `head`".into()))?;
    let head = Linear {
        weight: net.head.weight.gather(1, &head_plan.in_keep)?,
        bias: net.head.bias.clone(),
    };
    Ok(CompactNetwork {
        arch: net.arch.clone(),
        mode,
        stages,
        head,
    })
}

impl CompactNetwork {
    pub fn layers(&self) -> Vec<&CompactLayer> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                CompactStage::Plain(l) => out.push(l),
                CompactStage::Residual { a, b, proj } => {
                    out.push(a);
                    out.push(b);
                    out.extend(proj.iter());
                }
            }
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut CompactLayer> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                CompactStage::Plain(l) => out.push(l),
                CompactStage::Residual { a, b, proj } => {
                    out.push(a);
                    out.push(b);
                    out.extend(proj.iter_mut());
                }
            }
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = match s {
                CompactStage::Plain(l) => l.forward(g, h)?,
                CompactStage::Residual { a, b, proj } => {
                    let ya = a.forward(g, h)?;
                    let yb = b.forward(g, ya)?;
                    let sc = match proj {
                        Some(p) => p.forward(g, h)?,
                        None => h,
                    };
                    let sum = g.add(yb, sc)?;
                    g.relu(sum)?
                }
            };
        }
        let pooled = g.gap(h)?;
        self.head.forward(g, pooled)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let logits = self.forward(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    /// Conv and head MAdds read off the actual weight shapes for an `hw x hw` input.
    pub fn measured_madds(&self, hw: usize) -> u64 {
        let mut total = 0u64;
        let mut size = hw;
        let mut conv = |l: &CompactLayer, size: usize| {
            let k = l.block.kernel();
            let out = (size + 2 * l.block.padding - k) / l.block.stride + 1;
            total += l.block.weight.numel() as u64 * (out * out) as u64;
            out
        };
        for s in &self.stages {
            size = match s {
                CompactStage::Plain(l) => conv(l, size),
                CompactStage::Residual { a, b, proj } => {
                    let out = conv(a, size);
                    conv(b, out);
                    if let Some(p) = proj {
                        conv(p, size);
                    }
                    out
                }
            };
        }
        total + self.head.weight.numel() as u64
    }

    pub fn meta(&self) -> Vec<CompactLayerMeta> {
        self.layers().iter().map(|l| l.meta()).collect()
    }

    /// Rebuilds a network from its metadata and named tensors.
    pub fn from_parts(arch: ArchSpec, mode: ScaleMode, meta: &[CompactLayerMeta], tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let take = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mut metas = meta.iter();
        let mut build = |expected: String| -> Result<CompactLayer> {
            let m = metas
                .next()
                .filter(|m| m.name == expected)
                .ok_or_else(|| Error::Checkpoint(format!("layer metadata for `{expected}` missing or out of order")))?;
            let generator = if m.generator {
                let p = format!("{}.gen", m.name);
                Some(SalienceGenerator {
                    fc1: Linear {
                        weight: take(&format!("{p}.fc1.weight"))?,
                        bias: take(&format!("{p}.fc1.bias"))?,
                    },
                    fc2: Linear {
                        weight: take(&format!("{p}.fc2.weight"))?,
                        bias: take(&format!("{p}.fc2.bias"))?,
                    },
                })
            } else {
                None
            };
            Ok(CompactLayer {
                name: m.name.clone(),
                block: ConvBlock {
                    weight: take(&format!("{}.conv.weight", m.name))?,
                    bias: take(&format!("{}.conv.bias", m.name))?,
                    bn: None,
                    activation: if m.relu { crate::nn::Activation::Relu } else { crate::nn::Activation::None },
                    stride: m.stride,
                    padding: m.padding,
                },
                generator,
                scatter: m.scatter.clone(),
            })
        };
        let mut stages = Vec::new();
        let mut c_in = arch.in_channels;
        for (i, s) in arch.stages.iter().enumerate() {
            match *s {
                crate::network::StageSpec::Conv { out, .. } => {
                    stages.push(CompactStage::Plain(build(format!("s{i}"))?));
                    c_in = out;
                }
                crate::network::StageSpec::Residual { out, stride } => {
                    let a = build(format!("s{i}.a"))?;
                    let b = build(format!("s{i}.b"))?;
                    let proj = if stride != 1 || c_in != out { Some(build(format!("s{i}.proj"))?) } else { None };
                    stages.push(CompactStage::Residual { a, b, proj });
                    c_in = out;
                }
            }
        }
        if metas.next().is_some() {
            return Err(Error::Checkpoint("extra layer metadata".into()));
        }
        let head = Linear {
            weight: take("head.weight")?,
            bias: take("head.bias")?,
        };
        Ok(CompactNetwork { arch, mode, stages, head })
    }
}

impl State for CompactNetwork {
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for l in self.layers() {
            let conv = format!("{}.conv", l.name);
            l.block.visit_state(&mut prefixed(&conv, f));
            if let Some(gen) = &l.generator {
                let p = format!("{}.gen", l.name);
                gen.visit_state(&mut prefixed(&p, f));
            }
        }
        self.head.visit_state(&mut prefixed("head", f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for l in self.layers_mut() {
            let conv = format!("{}.conv", l.name);
            l.block.visit_state_mut(&mut prefixed_mut(&conv, f));
            if let Some(gen) = &mut l.generator {
                let p = format!("{}.gen", l.name);
                gen.visit_state_mut(&mut prefixed_mut(&p, f));
            }
        }
        self.head.visit_state_mut(&mut prefixed_mut("head", f));
    }
}
