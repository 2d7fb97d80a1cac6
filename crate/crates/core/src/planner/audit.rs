//! Independent verification of a deployment plan.
//!
//! Nothing here reuses the planner's helpers: receptive fields are found by
//! enumerating kernel taps, nodes are re-derived from layer kinds and output
//! coverage is checked on an explicit bitmap.

use serde::Serialize;

use crate::graph::{LayerKind, LayerSpec, NetGraph};

use super::{DeploymentPlan, Tile, WeightPolicy};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub layers: usize,
    pub tiles: usize,
    pub nodes: usize,
    pub max_tile_l1: usize,
    pub max_node_l2: usize,
}

fn input_rows_needed(l: &LayerSpec, rows: (usize, usize)) -> Option<(usize, usize)> {
    let (k, s, p) = (l.kernel.0 as i64, l.stride.0 as i64, l.padding.0 as i64);
    let h = l.in_shape.h as i64;
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for oy in rows.0 as i64..rows.1 as i64 {
        for ky in 0..k {
            let iy = oy * s + ky - p;
            if (0..h).contains(&iy) {
                lo = lo.min(iy);
                hi = hi.max(iy + 1);
            }
        }
    }
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn expected_bytes(l: &LayerSpec, t: &Tile) -> Result<(usize, usize, usize), String> {
    let chans = t.out_channels.1 - t.out_channels.0;
    let (i, o) = (l.in_shape, l.out_shape);
    match l.kind {
        LayerKind::Conv2d | LayerKind::MaxPool => {
            let need = input_rows_needed(l, t.out_rows).ok_or("tile reads no input rows")?;
            if t.in_rows.0 > need.0 || t.in_rows.1 < need.1 {
                return Err(format!("input rows {:?} miss receptive field {:?}", t.in_rows, need));
            }
            let rows_out = t.out_rows.1 - t.out_rows.0;
            let in_ch = if l.kind == LayerKind::Conv2d { i.c } else { chans };
            let w = if l.kind == LayerKind::Conv2d { chans * i.c * l.kernel.0 * l.kernel.1 } else { 0 };
            Ok(((need.1 - need.0) * i.w * in_ch, w, rows_out * o.w * chans))
        }
        LayerKind::FullyConnected => Ok((i.c * i.h * i.w, chans * i.c * i.h * i.w, chans * 4)),
        _ => Err("elementwise layers are not tiled".into()),
    }
}

/// Re-derives every quantity in `p` from `g` and checks the L1, coverage,
/// L2 and weight-ordering invariants. Returns every finding on failure.
pub fn audit(g: &NetGraph, p: &DeploymentPlan) -> Result<AuditReport, Vec<String>> {
    let mut bad = Vec::new();
    let mut rep = AuditReport::default();
    let l1 = p.mem.l1_bytes;

    let tiled: Vec<usize> = g
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv2d | LayerKind::FullyConnected | LayerKind::MaxPool))
        .map(|(i, _)| i)
        .collect();
    let planned: Vec<usize> = p.tilings.iter().map(|t| t.layer).collect();
    if planned != tiled {
        bad.push(format!("tiled layers {planned:?}, expected {tiled:?}"));
    }

    for lt in &p.tilings {
        let Some(l) = g.layers.get(lt.layer) else {
            bad.push(format!("tiling refers to missing layer {}", lt.layer));
            continue;
        };
        rep.layers += 1;
        let rows = if l.kind == LayerKind::FullyConnected { 1 } else { l.out_shape.h };
        let chans = l.out_shape.c;
        let mut cover = vec![0u8; rows * chans];
        for (k, t) in lt.tiles.iter().enumerate() {
            rep.tiles += 1;
            let here = format!("{} tile {k}", l.name);
            if t.out_rows.0 >= t.out_rows.1 || t.out_rows.1 > rows || t.out_channels.0 >= t.out_channels.1 || t.out_channels.1 > chans {
                bad.push(format!("{here}: slice out of bounds"));
                continue;
            }
            for r in t.out_rows.0..t.out_rows.1 {
                for c in t.out_channels.0..t.out_channels.1 {
                    cover[r * chans + c] = cover[r * chans + c].saturating_add(1);
                }
            }
            match expected_bytes(l, t) {
                Ok((i, w, o)) => {
                    let ws = 2 * (i + w + o);
                    if (t.in_bytes, t.weight_bytes, t.out_bytes, t.l1_bytes) != (i, w, o, ws) {
                        bad.push(format!("{here}: recorded sizes differ from recomputed in={i} w={w} out={o}"));
                    }
                    if ws > l1 {
                        bad.push(format!("{here}: {ws} B double-buffered exceeds L1 {l1} B"));
                    }
                    rep.max_tile_l1 = rep.max_tile_l1.max(ws);
                }
                Err(e) => bad.push(format!("{here}: {e}")),
            }
        }
        if let Some(pos) = cover.iter().position(|&n| n != 1) {
            bad.push(format!("{}: output ({}, {}) covered {} times", l.name, pos / chans, pos % chans, cover[pos]));
        }
    }

    // nodes: a new node at every weighted layer, and at pools unless fused
    let mut nodes: Vec<Vec<usize>> = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        let starts = match l.kind {
            LayerKind::Conv2d | LayerKind::FullyConnected => true,
            LayerKind::MaxPool => !p.fuse_pool,
            _ => false,
        };
        if starts || nodes.is_empty() {
            nodes.push(vec![i]);
        } else {
            nodes.last_mut().expect("non-empty").push(i);
        }
    }
    let weights: Vec<usize> = nodes
        .iter()
        .map(|n| n.iter().map(|&i| g.layers[i].weight_shape().map_or(0, |s| s.iter().product())).sum())
        .collect();
    let total_w: usize = weights.iter().sum();
    if nodes.len() != p.occupancy.len() {
        bad.push(format!("{} occupancy rows, expected {} nodes", p.occupancy.len(), nodes.len()));
    }
    if p.l3_weight_bytes != total_w {
        bad.push(format!("L3 weights {} B, expected {total_w} B", p.l3_weight_bytes));
    }
    for (k, (n, o)) in nodes.iter().zip(&p.occupancy).enumerate() {
        rep.nodes += 1;
        let first = &g.layers[n[0]];
        let last = &g.layers[*n.last().expect("non-empty")];
        let input = first.in_shape.c * first.in_shape.h * first.in_shape.w;
        let per = if last.kind == LayerKind::FullyConnected { 4 } else { 1 };
        let output = last.out_shape.c * last.out_shape.h * last.out_shape.w * per;
        let wsum = match p.policy {
            WeightPolicy::StreamedL3 => {
                let next = weights.get(k + 1).copied().unwrap_or(0);
                if (o.weights_current, o.weights_next) != (weights[k], next) {
                    bad.push(format!("{}: streamed weights ({}, {}) expected ({}, {next})", o.name, o.weights_current, o.weights_next, weights[k]));
                }
                weights[k] + next
            }
            WeightPolicy::ResidentL2 => total_w,
        };
        let total = p.mem.code_budget_l2 + wsum + input + output;
        if o.total != total || o.input != input || o.output != output {
            bad.push(format!("{}: recorded L2 {} B, recomputed {total} B", o.name, o.total));
        }
        if total > p.mem.l2_bytes {
            bad.push(format!("{}: {total} B exceeds L2 {} B", o.name, p.mem.l2_bytes));
        }
        rep.max_node_l2 = rep.max_node_l2.max(total);
    }
    if bad.is_empty() {
        Ok(rep)
    } else {
        Err(bad)
    }
}
