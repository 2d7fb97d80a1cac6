//! Deployment planning over a three-level memory hierarchy: L1 tiling with
//! double buffering, per-node L2 occupancy and the weight placement policy.

pub mod audit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LayerKind, LayerSpec, NetGraph};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("layer {layer}: smallest tile needs {need} B double-buffered, L1 has {budget} B")]
    Untileable { layer: String, need: usize, budget: usize },
    #[error("L2 overflow: {}", .0.iter().map(|(n, b)| format!("{n} needs {b} B")).collect::<Vec<_>>().join(", "))]
    L2Violation(Vec<(String, usize)>),
    #[error("resident weights need {need} B of L2, only {l2} B available")]
    ResidentInfeasible { need: usize, l2: usize },
    #[error("invalid memory hierarchy: {0}")]
    Hierarchy(String),
    #[error("unknown weight policy {0:?} (expected streamed or resident)")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryHierarchy {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub l3_bytes: usize,
    pub code_budget_l2: usize,
    pub dma_channels: String,
}

impl Default for MemoryHierarchy {
    fn default() -> Self {
        Self {
            l1_bytes: 65_536,
            l2_bytes: 524_288,
            l3_bytes: 8_388_608,
            code_budget_l2: 81_920,
            dma_channels: "L3-L2 (HyperBus), L2-L1 (cluster DMA)".into(),
        }
    }
}

impl MemoryHierarchy {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.l1_bytes < self.l2_bytes && self.l2_bytes < self.l3_bytes) {
            return Err(PlanError::Hierarchy("levels must grow: l1 < l2 < l3".into()));
        }
        if self.code_budget_l2 >= self.l2_bytes {
            return Err(PlanError::Hierarchy("code budget must be smaller than L2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// Weights live in L3; node i+1's weights are fetched while node i runs.
    StreamedL3,
    /// All weights are pre-loaded into L2.
    ResidentL2,
}

impl FromStr for WeightPolicy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "streamed" | "streamed_l3" => Ok(Self::StreamedL3),
            "resident" | "resident_l2" => Ok(Self::ResidentL2),
            other => Err(PlanError::Policy(other.into())),
        }
    }
}

impl fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StreamedL3 => "streamed",
            Self::ResidentL2 => "resident",
        })
    }
}

/// Half-open index range.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Output rows (spatial layers) or `(0, 1)` for FC.
    pub out_rows: Span,
    pub out_channels: Span,
    /// Input rows read, including halo.
    pub in_rows: Span,
    /// Input channels read.
    pub in_channels: Span,
    pub in_bytes: usize,
    pub weight_bytes: usize,
    pub out_bytes: usize,
    /// `2 * (in + weights + out)`.
    pub l1_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiling {
    pub layer: usize,
    pub name: String,
    pub rows_per_tile: usize,
    pub channels_per_tile: usize,
    /// Execution order: channel chunks outer, row chunks inner.
    pub tiles: Vec<Tile>,
}

fn layer_tiles(l: &LayerSpec, rows: usize, chans: usize) -> Vec<Tile> {
    let o = l.out_shape;
    let i = l.in_shape;
    let (out_h, out_w) = if l.kind == LayerKind::FullyConnected { (1, 1) } else { (o.h, o.w) };
    let mut tiles = Vec::new();
    for c0 in (0..o.c).step_by(chans) {
        let c1 = (c0 + chans).min(o.c);
        for r0 in (0..out_h).step_by(rows) {
            let r1 = (r0 + rows).min(out_h);
            let (in_rows, in_channels, weight_bytes) = match l.kind {
                LayerKind::Conv2d => {
                    let (k, s, p) = (l.kernel.0, l.stride.0, l.padding.0);
                    let lo = (r0 * s).saturating_sub(p);
                    let hi = ((r1 - 1) * s + k).saturating_sub(p).min(i.h);
                    ((lo, hi), (0, i.c), (c1 - c0) * l.in_ch * l.kernel.0 * l.kernel.1)
                }
                LayerKind::MaxPool => {
                    let (k, s) = (l.kernel.0, l.stride.0);
                    ((r0 * s, ((r1 - 1) * s + k).min(i.h)), (c0, c1), 0)
                }
                LayerKind::FullyConnected => ((0, i.h), (0, i.c), (c1 - c0) * l.in_ch),
                _ => ((r0, r1), (c0, c1), 0),
            };
            let in_bytes = (in_rows.1 - in_rows.0) * i.w * (in_channels.1 - in_channels.0);
            let out_bytes = (r1 - r0) * out_w * (c1 - c0) * l.out_elem_bytes();
            tiles.push(Tile {
                out_rows: (r0, r1),
                out_channels: (c0, c1),
                in_rows,
                in_channels,
                in_bytes,
                weight_bytes,
                out_bytes,
                l1_bytes: 2 * (in_bytes + weight_bytes + out_bytes),
            });
        }
    }
    tiles
}

/// Splits one layer into L1 tiles: output rows first, then output channels.
/// Among fitting tilings the fewest tiles win, then the widest channel chunk
/// (innermost in HWC), then the tallest row chunk.
pub fn tile_layer(l: &LayerSpec, l1_budget: usize) -> Result<LayerTiling, PlanError> {
    let out_h = if l.kind == LayerKind::FullyConnected { 1 } else { l.out_shape.h };
    let out_c = l.out_shape.c;
    let fits = |rows: usize, chans: usize| layer_tiles(l, rows, chans).iter().all(|t| t.l1_bytes <= l1_budget);
    if !fits(1, 1) {
        let need = layer_tiles(l, 1, 1).iter().map(|t| t.l1_bytes).max().unwrap_or(0);
        return Err(PlanError::Untileable { layer: l.name.clone(), need, budget: l1_budget });
    }
    let mut best: Option<(usize, usize, usize)> = None; // (tiles, chans, rows)
    for chans in (1..=out_c).rev() {
        if !fits(1, chans) {
            continue;
        }
        // tallest fitting row chunk (working set grows with rows)
        let (mut lo, mut hi) = (1, out_h);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid, chans) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let n = out_h.div_ceil(lo) * out_c.div_ceil(chans);
        let better = match best {
            None => true,
            Some((bn, bc, br)) => (n, usize::MAX - chans, usize::MAX - lo) < (bn, usize::MAX - bc, usize::MAX - br),
        };
        if better {
            best = Some((n, chans, lo));
        }
    }
    let (_, chans, rows) = best.expect("1x1 fits");
    Ok(LayerTiling { layer: 0, name: l.name.clone(), rows_per_tile: rows, channels_per_tile: chans, tiles: layer_tiles(l, rows, chans) })
}

/// L2 occupancy of one node (a compute layer with its fused followers).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOccupancy {
    pub node: usize,
    pub name: String,
    pub layers: Vec<usize>,
    pub code: usize,
    /// Streamed policy: this node's weights.
    pub weights_current: usize,
    /// Streamed policy: the next node's weights, fetched during this node.
    pub weights_next: usize,
    /// Resident policy: all weights.
    pub weights_resident: usize,
    pub input: usize,
    pub output: usize,
    pub total: usize,
    /// This node's weights as stored in L3.
    pub l3_weights: usize,
    /// Code, every weight and this node's buffers, with no placement policy.
    pub naive_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub policy: WeightPolicy,
    pub mem: MemoryHierarchy,
    pub fuse_pool: bool,
    pub tilings: Vec<LayerTiling>,
    pub occupancy: Vec<NodeOccupancy>,
    pub l3_weight_bytes: usize,
    /// Largest `naive_total` over nodes.
    pub naive_peak: usize,
}

impl DeploymentPlan {
    pub fn peak_l2(&self) -> usize {
        self.occupancy.iter().map(|o| o.total).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub policy: WeightPolicy,
    pub fuse_pool: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { policy: WeightPolicy::StreamedL3, fuse_pool: true }
    }
}

pub(crate) fn node_weights(g: &NetGraph, node: &[usize]) -> usize {
    node.iter().map(|&i| g.layers[i].params()).sum()
}

pub(crate) fn node_io(g: &NetGraph, node: &[usize]) -> (usize, usize) {
    let first = &g.layers[node[0]];
    let last = &g.layers[*node.last().expect("non-empty node")];
    (first.in_shape.elems(), last.out_shape.elems() * last.out_elem_bytes())
}

/// Tiles every layer and records per-node L2 occupancy. Any node above the
/// L2 budget is reported as an error naming the node and its total.
pub fn plan(g: &NetGraph, mem: &MemoryHierarchy, opts: PlanOptions) -> Result<DeploymentPlan, PlanError> {
    mem.validate()?;
    let mut tilings = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        if matches!(l.kind, LayerKind::Conv2d | LayerKind::FullyConnected | LayerKind::MaxPool) {
            let mut t = tile_layer(l, mem.l1_bytes)?;
            t.layer = i;
            tilings.push(t);
        }
    }
    let nodes = if g.layers.is_empty() { Vec::new() } else { g.stages(opts.fuse_pool) };
    let weights: Vec<usize> = nodes.iter().map(|n| node_weights(g, n)).collect();
    let all_weights: usize = weights.iter().sum();
    let mut occupancy = Vec::with_capacity(nodes.len());
    for (k, n) in nodes.iter().enumerate() {
        let (input, output) = node_io(g, n);
        let (cur, next, resident) = match opts.policy {
            WeightPolicy::StreamedL3 => (weights[k], weights.get(k + 1).copied().unwrap_or(0), 0),
            WeightPolicy::ResidentL2 => (0, 0, all_weights),
        };
        let code = mem.code_budget_l2;
        occupancy.push(NodeOccupancy {
            node: k,
            name: g.layers[n[0]].name.clone(),
            layers: n.clone(),
            code,
            weights_current: cur,
            weights_next: next,
            weights_resident: resident,
            input,
            output,
            total: code + cur + next + resident + input + output,
            l3_weights: weights[k],
            naive_total: code + all_weights + input + output,
        });
    }
    if opts.policy == WeightPolicy::ResidentL2 {
        let worst_pair = occupancy.iter().map(|o| o.input + o.output).max().unwrap_or(0);
        let need = all_weights + mem.code_budget_l2 + worst_pair;
        if need > mem.l2_bytes {
            return Err(PlanError::ResidentInfeasible { need, l2: mem.l2_bytes });
        }
    }
    let over: Vec<(String, usize)> =
        occupancy.iter().filter(|o| o.total > mem.l2_bytes).map(|o| (o.name.clone(), o.total)).collect();
    if !over.is_empty() {
        return Err(PlanError::L2Violation(over));
    }
    let naive_peak = occupancy.iter().map(|o| o.naive_total).max().unwrap_or(0);
    Ok(DeploymentPlan {
        policy: opts.policy,
        mem: mem.clone(),
        fuse_pool: opts.fuse_pool,
        tilings,
        occupancy,
        l3_weight_bytes: all_weights,
        naive_peak,
    })
}

/// Per-node L2 table as CSV. The resident policy replaces the current/next
/// weight columns with a single resident-weights column.
pub fn memory_report_csv(p: &DeploymentPlan) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let streamed = p.policy == WeightPolicy::StreamedL3;
    let mut header = vec!["layer", "code"];
    header.extend(if streamed { vec!["weights_current", "weights_next"] } else { vec!["weights_resident"] });
    header.extend(["input", "output", "total", "l3_weights"]);
    w.write_record(&header).expect("in-memory write");
    for o in &p.occupancy {
        let mut row = vec![o.name.clone(), o.code.to_string()];
        if streamed {
            row.extend([o.weights_current.to_string(), o.weights_next.to_string()]);
        } else {
            row.push(o.weights_resident.to_string());
        }
        row.extend([o.input.to_string(), o.output.to_string(), o.total.to_string(), o.l3_weights.to_string()]);
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Fixed-width human-readable version of the report.
pub fn memory_report_table(p: &DeploymentPlan) -> String {
    let csv = memory_report_csv(p);
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out.push_str(&format!(
        "policy {}; peak L2 {} of {} B; L3 weights {} B; all-resident naive peak {} B\n",
        p.policy,
        p.peak_l2(),
        p.mem.l2_bytes,
        p.l3_weight_bytes,
        p.naive_peak
    ));
    out
}
