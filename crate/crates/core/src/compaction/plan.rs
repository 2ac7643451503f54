use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cost::graph::{NetGraph, NodeKind, INPUT};
use crate::error::{Error, Result};

/// Keep-pattern of one layer's output channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask(pub Vec<bool>);

impl ChannelMask {
    pub fn full(width: usize) -> Self {
        ChannelMask(vec![true; width])
    }

    pub fn from_keep(width: usize, keep: &[usize]) -> Self {
        let mut m = vec![false; width];
        keep.iter().for_each(|&c| m[c] = true);
        ChannelMask(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&c| self.0[c]).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }
}

/// `mask[c] = running[c] > epsilon`. With the default `epsilon = 0` this is
/// the exact nonzero test.
pub fn make_mask(layer: &str, running: &[f32], epsilon: f32) -> Result<ChannelMask> {
    if let Some(bad) = running.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Plan(format!("layer {layer}: running salience {bad} is not a finite non-negative value")));
    }
    let mask = ChannelMask(running.iter().map(|&v| v > epsilon).collect());
    if mask.kept_count() == 0 {
        return Err(Error::EmptyMask { layer: layer.into() });
    }
    Ok(mask)
}

/// Channel bookkeeping for one weighted node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub kind: NodeKind,
    /// Full (unpruned) output width.
    pub c_out: usize,
    /// Full width of the producer's channel layout.
    pub c_in: usize,
    pub out_keep: Vec<usize>,
    pub in_keep: Vec<usize>,
    /// Spatial positions per input channel; dense layers flatten their producer.
    pub in_spatial: usize,
    /// Pruned outputs are written back into a full-width buffer at `out_keep`.
    pub scatter: bool,
}

impl LayerPlan {
    pub fn width_ratio(&self) -> f64 {
        self.out_keep.len() as f64 / self.c_out as f64
    }

    /// Width of the tensor this layer actually materializes.
    pub fn out_layout(&self) -> usize {
        if self.scatter {
            self.c_out
        } else {
            self.out_keep.len()
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_keep.len() * self.in_spatial
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn is_identity(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.out_keep.len() == l.c_out && l.in_keep.len() == l.c_in)
    }
}

/// Derives every weighted node's input keep-set from its producer's output
/// layout. Members of a residual group keep a full-width layout by scattering.
pub fn propagate_masks(graph: &NetGraph, masks: &BTreeMap<String, ChannelMask>) -> Result<PrunePlan> {
    graph.validate()?;
    let index = graph.index();
    for name in masks.keys() {
        match index.get(name.as_str()).map(|&i| graph.nodes[i].kind) {
            Some(NodeKind::Conv) => {}
            Some(_) => return Err(Error::Plan(format!("mask given for non-conv node `{name}`"))),
            None => return Err(Error::Plan(format!("mask given for unknown node `{name}`"))),
        }
    }
    let all = |w: usize| (0..w).collect::<Vec<_>>();
    let mut layout: HashMap<&str, Vec<usize>> = HashMap::new();
    layout.insert(INPUT, all(graph.input.channels));
    let mut layers = Vec::new();
    for node in &graph.nodes {
        let producer = |p: &str| layout.get(p).cloned().expect("validated producer order");
        let out = match node.kind {
            NodeKind::Conv => {
                let in_keep = producer(&node.inputs[0]);
                let out_keep = match masks.get(&node.name) {
                    Some(m) if m.len() != node.c_out => {
                        return Err(Error::Plan(format!(
                            "mask for `{}` has length {} but the node has {} outputs",
                            node.name,
                            m.len(),
                            node.c_out
                        )))
                    }
                    Some(m) if m.kept_count() == 0 => {
                        return Err(Error::EmptyMask {
                            layer: node.name.clone(),
                        })
                    }
                    Some(m) => m.kept(),
                    None => all(node.c_out),
                };
                let scatter = node.group.is_some() && out_keep.len() < node.c_out;
                let out = if node.group.is_some() { all(node.c_out) } else { out_keep.clone() };
                layers.push(LayerPlan {
                    name: node.name.clone(),
                    kind: node.kind,
                    c_out: node.c_out,
                    c_in: node.c_in,
                    out_keep,
                    in_keep,
                    in_spatial: 1,
                    scatter,
                });
                out
            }
            NodeKind::Linear | NodeKind::ClassifierHead => {
                let p = &node.inputs[0];
                let extent = graph.producer_extent(p).expect("validated");
                layers.push(LayerPlan {
                    name: node.name.clone(),
                    kind: node.kind,
                    c_out: node.c_out,
                    c_in: extent.channels,
                    out_keep: all(node.c_out),
                    in_keep: producer(p),
                    in_spatial: extent.h * extent.w,
                    scatter: false,
                });
                all(node.c_out)
            }
            NodeKind::Pool => producer(&node.inputs[0]),
            NodeKind::Add => {
                for p in &node.inputs {
                    if producer(p).len() != node.c_out {
                        return Err(Error::Plan(format!(
                            "summand `{p}` of `{}` is pruned but not a member of residual group `{}`",
                            node.name,
                            node.group.as_deref().unwrap_or("")
                        )));
                    }
                }
                all(node.c_out)
            }
        };
        layout.insert(&node.name, out);
    }
    Ok(PrunePlan { layers })
}

/// Per-layer summary written next to a compacted checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub layers: Vec<PlanReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReportRow {
    pub name: String,
    pub kept: usize,
    pub total: usize,
    pub width_ratio: f64,
}

impl PlanReport {
    pub fn new(plan: &PrunePlan) -> Self {
        PlanReport {
            layers: plan
                .layers
                .iter()
                .filter(|l| l.kind == NodeKind::Conv)
                .map(|l| PlanReportRow {
                    name: l.name.clone(),
                    kept: l.out_keep.len(),
                    total: l.c_out,
                    width_ratio: l.width_ratio(),
                })
                .collect(),
        }
    }

    /// Masks keeping the first `kept` channels of each listed layer. Costs
    /// depend only on the counts, so this reproduces the report's plan size.
    pub fn masks(&self, graph: &NetGraph) -> Result<BTreeMap<String, ChannelMask>> {
        let mut masks = BTreeMap::new();
        for row in &self.layers {
            let node = graph.node(&row.name).ok_or_else(|| Error::Graph {
                node: row.name.clone(),
                detail: "plan names a node the graph does not have".into(),
            })?;
            if node.kind != NodeKind::Conv || node.c_out != row.total || row.kept == 0 || row.kept > row.total {
                return Err(Error::Graph {
                    node: row.name.clone(),
                    detail: format!("plan keeps {} of {} channels; node is {:?} with {} outputs", row.kept, row.total, node.kind, node.c_out),
                });
            }
            let keep: Vec<usize> = (0..row.kept).collect();
            masks.insert(row.name.clone(), ChannelMask::from_keep(row.total, &keep));
        }
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::graph::{builtin_graph, GraphNode, InputSpec};

    fn chain() -> NetGraph {
        NetGraph {
            name: "chain".into(),
            input: InputSpec {
                channels: 3,
                height: 8,
                width: 8,
            },
            nodes: vec![
                GraphNode::conv("c1", INPUT, 3, 4, 3, 1, 1, 8),
                GraphNode::conv("c2", "c1", 4, 5, 3, 1, 1, 8),
                GraphNode::pool("gap", "c2", 5, 8, 1, 0, 8),
                GraphNode::dense("fc", "gap", 5, 2, true),
            ],
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(make_mask("l", &[0.0, 0.3, 0.0], 0.0).unwrap().0, vec![false, true, false]);
        assert_eq!(make_mask("l", &[0.1, 0.3], 0.0).unwrap().kept_count(), 2);
        assert!(matches!(make_mask("l", &[0.0, 0.0], 0.0), Err(Error::EmptyMask { .. })));
        assert!(make_mask("l", &[f32::NAN, 1.0], 0.0).is_err());
        assert_eq!(make_mask("l", &[0.05, 0.3], 0.1).unwrap().kept(), vec![1]);
    }

    #[test]
    fn chain_propagation() {
        let g = chain();
        let mut masks = BTreeMap::new();
        masks.insert("c1".to_string(), ChannelMask::from_keep(4, &[0, 2]));
        masks.insert("c2".to_string(), ChannelMask::from_keep(5, &[1, 3, 4]));
        let plan = propagate_masks(&g, &masks).unwrap();
        let c2 = plan.layer("c2").unwrap();
        assert_eq!(c2.in_keep, vec![0, 2]);
        assert_eq!(c2.out_keep, vec![1, 3, 4]);
        assert!(!c2.scatter);
        assert_eq!(plan.layer("fc").unwrap().in_keep, vec![1, 3, 4]);
        assert_eq!(plan.layer("c1").unwrap().in_keep, vec![0, 1, 2]);
    }

    #[test]
    fn no_masks_is_identity() {
        let plan = propagate_masks(&builtin_graph("resnet18").unwrap(), &BTreeMap::new()).unwrap();
        assert!(plan.is_identity());
        assert_eq!(plan.layers.len(), 21);
    }

    #[test]
    fn residual_members_scatter() {
        let g = builtin_graph("resnet18").unwrap();
        let mut masks = BTreeMap::new();
        for n in g.nodes.iter().filter(|n| n.kind == NodeKind::Conv) {
            masks.insert(n.name.clone(), ChannelMask::from_keep(n.c_out, &(0..n.c_out / 2).collect::<Vec<_>>()));
        }
        let plan = propagate_masks(&g, &masks).unwrap();
        let c2 = plan.layer("layer1.0.conv2").unwrap();
        assert!(c2.scatter);
        assert_eq!(c2.out_layout(), 64);
        // the consumer after a junction sees the full width
        assert_eq!(plan.layer("layer1.1.conv1").unwrap().in_keep.len(), 64);
        // interior convs pass their pruned layout straight on
        let inner = plan.layer("layer1.0.conv1").unwrap();
        assert!(!inner.scatter);
        assert_eq!(plan.layer("layer1.0.conv2").unwrap().in_keep, inner.out_keep);
        // every weighted node is planned exactly once
        let weighted = g.nodes.iter().filter(|n| n.kind.has_weights()).count();
        assert_eq!(plan.layers.len(), weighted);
    }

    #[test]
    fn plan_errors() {
        let g = chain();
        let mut masks = BTreeMap::new();
        masks.insert("c9".to_string(), ChannelMask::full(4));
        assert!(propagate_masks(&g, &masks).is_err());
        let mut masks = BTreeMap::new();
        masks.insert("c1".to_string(), ChannelMask::full(3));
        assert!(propagate_masks(&g, &masks).is_err());
        let mut masks = BTreeMap::new();
        masks.insert("c1".to_string(), ChannelMask(vec![false; 4]));
        assert!(matches!(propagate_masks(&g, &masks), Err(Error::EmptyMask { .. })));
        let mut masks = BTreeMap::new();
        masks.insert("fc".to_string(), ChannelMask::full(2));
        assert!(propagate_masks(&g, &masks).is_err());
    }

    #[test]
    fn report_rows() {
        let mut masks = BTreeMap::new();
        masks.insert("c1".to_string(), ChannelMask::from_keep(4, &[1]));
        let plan = propagate_masks(&chain(), &masks).unwrap();
        let report = PlanReport::new(&plan);
        assert_eq!(report.layers.len(), 2);
        assert_eq!((report.layers[0].kept, report.layers[0].total), (1, 4));
        assert_eq!(report.layers[0].width_ratio, 0.25);
    }
}
