//! Exact MAdds, MAC and parameter counts over a [`NetGraph`], optionally
//! under a [`PrunePlan`].
//!
//! Conventions: a conv or dense layer costs `C_out*C_in*K*K*H_out*W_out`
//! multiply-adds; its MAC is the kernel footprint plus the output feature map
//! it writes. Pooling is free. A residual junction writes its own output map
//! and so contributes that map's MAC term. Bias and BN are not counted as
//! MAdds; parameters include one bias per output channel.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::compaction::plan::PrunePlan;
use crate::error::{Error, Result};
use graph::{NetGraph, NodeKind};

pub use graph::builtin_graph;

pub fn conv_madds(c_out: usize, c_in: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    [c_out, c_in, kernel, kernel, h_out, w_out]
        .iter()
        .map(|&v| v as u64)
        .product()
}

/// Kernel footprint plus the output feature map.
pub fn layer_mac(c_out: usize, c_in: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    let (co, ci, k) = (c_out as u64, c_in as u64, kernel as u64);
    ci * co * k * k + co * h_out as u64 * w_out as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub madds: u64,
    pub mac: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            madds: self.madds + o.madds,
            mac: self.mac + o.mac,
            params: self.params + o.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub name: String,
    pub kind: NodeKind,
    pub cost: Cost,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruned: Option<Cost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub graph: String,
    pub nodes: Vec<NodeCost>,
    pub total: Cost,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruned_total: Option<Cost>,
}

impl CostReport {
    /// Pruned-to-original MAdds ratio, if a plan was applied.
    pub fn madds_ratio(&self) -> Option<f64> {
        self.pruned_total.map(|p| p.madds as f64 / self.total.madds as f64)
    }
}

/// Channel counts a node is evaluated with: `(c_in or f_in, c_out, written width)`.
struct Widths {
    c_in: usize,
    c_out: usize,
    out_layout: usize,
}

fn node_cost(node: &graph::GraphNode, w: &Widths) -> Cost {
    match node.kind {
        NodeKind::Conv | NodeKind::Linear | NodeKind::ClassifierHead => {
            let spatial = (node.out_h * node.out_w) as u64;
            let kernel = conv_madds(w.c_out, w.c_in, node.kernel, 1, 1);
            Cost {
                madds: kernel * spatial,
                mac: kernel + w.out_layout as u64 * spatial,
                params: kernel + w.c_out as u64,
            }
        }
        NodeKind::Pool => Cost::default(),
        NodeKind::Add => Cost {
            madds: 0,
            mac: (node.c_out * node.out_h * node.out_w) as u64,
            params: 0,
        },
    }
}

pub fn network_totals(graph: &NetGraph, plan: Option<&PrunePlan>) -> Result<CostReport> {
    graph.validate()?;
    if let Some(plan) = plan {
        let weighted = graph.nodes.iter().filter(|n| n.kind.has_weights()).count();
        if plan.layers.len() != weighted {
            return Err(Error::Plan(format!(
                "plan covers {} layers but the graph has {weighted} weighted nodes",
                plan.layers.len()
            )));
        }
    }
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    let mut total = Cost::default();
    let mut pruned_total = plan.map(|_| Cost::default());
    for node in &graph.nodes {
        let full = Widths {
            c_in: node.c_in,
            c_out: node.c_out,
            out_layout: node.c_out,
        };
        let cost = node_cost(node, &full);
        total = total + cost;
        let pruned = match plan {
            None => None,
            Some(plan) if node.kind.has_weights() => {
                let lp = plan
                    .layer(&node.name)
                    .ok_or_else(|| Error::Plan(format!("plan has no entry for `{}`", node.name)))?;
                let in_full = if node.kind.is_dense() { lp.c_in * lp.in_spatial } else { lp.c_in };
                if lp.c_out != node.c_out || in_full != node.c_in || lp.kind != node.kind {
                    return Err(Error::Plan(format!("plan entry for `{}` does not match the graph", node.name)));
                }
                let c_in = if node.kind.is_dense() { lp.in_features() } else { lp.in_keep.len() };
                Some(node_cost(
                    node,
                    &Widths {
                        c_in,
                        c_out: lp.out_keep.len(),
                        out_layout: lp.out_layout(),
                    },
                ))
            }
            Some(_) => Some(cost),
        };
        if let (Some(t), Some(p)) = (pruned_total.as_mut(), pruned) {
            *t = *t + p;
        }
        nodes.push(NodeCost {
            name: node.name.clone(),
            kind: node.kind,
            cost,
            pruned,
        });
    }
    Ok(CostReport {
        graph: graph.name.clone(),
        nodes,
        total,
        pruned_total,
    })
}

/// `1.8G`, `14.5M`, `950K`, or the bare count.
pub fn human(count: u64) -> String {
    let c = count as f64;
    if c >= 1e9 {
        format!("{:.1}G", c / 1e9)
    } else if c >= 1e6 {
        format!("{:.1}M", c / 1e6)
    } else if c >= 1e3 {
        format!("{:.1}K", c / 1e3)
    } else {
        count.to_string()
    }
}

pub fn format_table(report: &CostReport) -> String {
    let pruned = report.pruned_total.is_some();
    let mut header = vec!["node", "kind", "madds", "mac", "params"];
    if pruned {
        header.extend(["madds'", "mac'", "params'"]);
    }
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    let cells = |c: &Cost| vec![c.madds.to_string(), c.mac.to_string(), c.params.to_string()];
    for n in &report.nodes {
        let kind = serde_json::to_value(n.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let mut row = vec![n.name.clone(), kind];
        row.extend(cells(&n.cost));
        if let Some(p) = &n.pruned {
            row.extend(cells(p));
        }
        rows.push(row);
    }
    let mut total = vec!["total".to_string(), String::new()];
    total.extend(cells(&report.total));
    if let Some(p) = &report.pruned_total {
        total.extend(cells(p));
    }
    rows.push(total);

    let cols = rows[0].len();
    let width: Vec<usize> = (0..cols)
        .map(|i| rows.iter().map(|r| r.get(i).map_or(0, |s| s.len())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| if i < 2 { format!("{s:<w$}", w = width[i]) } else { format!("{s:>w$}", w = width[i]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    let t = &report.total;
    out.push_str(&format!(
        "{}: MAdds {}  MAC {}  Params {}\n",
        report.graph,
        human(t.madds),
        human(t.mac),
        human(t.params)
    ));
    if let (Some(p), Some(r)) = (&report.pruned_total, report.madds_ratio()) {
        out.push_str(&format!(
            "pruned: MAdds {}  MAC {}  Params {}  (MAdds ratio {r:.4})\n",
            human(p.madds),
            human(p.mac),
            human(p.params)
        ));
    }
    out
}
