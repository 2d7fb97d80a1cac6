//! Parametric latency, power and energy model over (VDD, f_FC, f_CL)
//! operating points.
//!
//! Each plan node (a compute layer with its fused followers) costs cluster
//! cycles for its arithmetic while the fabric controller streams the next
//! node's weights from L3. With double buffering the two overlap, so a node
//! takes `max(compute, stream)` and the difference is cluster idle time.
//! This is a calibrated model, not a cycle-accurate emulator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LayerKind, NetGraph, Variant};
use crate::planner::{plan, DeploymentPlan, MemoryHierarchy, PlanError, PlanOptions, WeightPolicy};

pub const FREQ_STEP_MHZ: f64 = 25.0;
pub const FC_MAX_MHZ: f64 = 250.0;
pub const CL_MAX_MHZ: f64 = 175.0;
pub const VDD_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("frequencies must be positive (f_fc = {f_fc} MHz, f_cl = {f_cl} MHz)")]
    ZeroFrequency { f_fc: f64, f_cl: f64 },
    #[error("{f_fc}/{f_cl} MHz is not on the {FREQ_STEP_MHZ} MHz grid up to FC {FC_MAX_MHZ} / CL {CL_MAX_MHZ} MHz")]
    OffGrid { f_fc: f64, f_cl: f64 },
    #[error("vdd {vdd} V is below the {min} V needed for FC {f_fc} MHz / CL {f_cl} MHz")]
    Undervolted { vdd: f64, min: f64, f_fc: f64, f_cl: f64 },
    #[error("invalid cost parameter {0}")]
    Params(String),
    #[error("calibration needs at least 3 targets, got {0}")]
    TooFewTargets(usize),
    #[error("degenerate fit: Jacobian rank {rank} < {params} (singular values {singular:?})")]
    RankDeficient { rank: usize, params: usize, singular: Vec<f64> },
    #[error("calibration diverged: {0}")]
    Diverged(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error(transparent)]
    Plan(#[from] PlanError),
}

// Minimum supply per domain, stepped by 0.05 V. The step points are an
// approximate transcription of a datasheet-style plot, not measured data.
fn min_vdd_fc(f: f64) -> f64 {
    let steps = ((f - 150.0) / FREQ_STEP_MHZ).ceil().max(0.0);
    1.0 + VDD_STEP * steps
}

fn min_vdd_cl(f: f64) -> f64 {
    let steps = ((f - 75.0) / FREQ_STEP_MHZ).ceil().max(0.0);
    1.0 + VDD_STEP * steps
}

/// Lowest supply voltage that sustains both clocks.
pub fn min_vdd(f_fc: f64, f_cl: f64) -> f64 {
    let v = min_vdd_fc(f_fc).max(min_vdd_cl(f_cl));
    (v * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub vdd: f64,
    pub f_fc: f64,
    pub f_cl: f64,
}

impl OperatingPoint {
    /// A point at the minimum voltage for its frequencies (MHz).
    pub fn new(f_fc: f64, f_cl: f64) -> Result<Self, CostError> {
        if !(f_fc > 0.0 && f_cl > 0.0) {
            return Err(CostError::ZeroFrequency { f_fc, f_cl });
        }
        Ok(Self { vdd: min_vdd(f_fc, f_cl), f_fc, f_cl })
    }

    /// Like [`OperatingPoint::new`] but also requires grid frequencies.
    pub fn on_grid(f_fc: f64, f_cl: f64) -> Result<Self, CostError> {
        let ok = |f: f64, max: f64| f > 0.0 && f <= max && (f / FREQ_STEP_MHZ).fract() == 0.0;
        if !ok(f_fc, FC_MAX_MHZ) || !ok(f_cl, CL_MAX_MHZ) {
            return Err(CostError::OffGrid { f_fc, f_cl });
        }
        Self::new(f_fc, f_cl)
    }

    pub fn with_vdd(vdd: f64, f_fc: f64, f_cl: f64) -> Result<Self, CostError> {
        let p = Self::new(f_fc, f_cl)?;
        if vdd + 1e-9 < p.vdd {
            return Err(CostError::Undervolted { vdd, min: p.vdd, f_fc, f_cl });
        }
        Ok(Self { vdd, ..p })
    }

    pub fn max_frequency() -> Self {
        Self::new(FC_MAX_MHZ, CL_MAX_MHZ).expect("positive")
    }

    fn check(&self) -> Result<(), CostError> {
        if !(self.f_fc > 0.0 && self.f_cl > 0.0) {
            return Err(CostError::ZeroFrequency { f_fc: self.f_fc, f_cl: self.f_cl });
        }
        Ok(())
    }
}

/// Every grid point: FC 25..=250 MHz by CL 25..=175 MHz, each at its minimum voltage.
pub fn default_grid() -> Vec<OperatingPoint> {
    let steps = |max: f64| (1..=(max / FREQ_STEP_MHZ) as usize).map(|k| k as f64 * FREQ_STEP_MHZ);
    steps(FC_MAX_MHZ)
        .flat_map(|fc| steps(CL_MAX_MHZ).map(move |cl| OperatingPoint::on_grid(fc, cl).expect("grid point")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Peak MAC/cycle of the cluster with all cores busy.
    pub eta_peak: f64,
    /// Cluster cores sharing the output positions of a layer.
    pub cores: f64,
    /// Cluster cycles per im2col element (output pixel x kernel tap x input channel).
    pub im2col_cpe: f64,
    /// Cluster cycles per output element (requantization, pooling, stores).
    pub out_cpe: f64,
    /// Cluster cycles per L1 tile (L2-L1 transfer setup and synchronization).
    pub tile_overhead: f64,
    /// L3-to-L2 weight bandwidth in bytes per FC cycle.
    pub dma_bytes_per_fc_cycle: f64,
    /// Dynamic coefficients, W / (Hz V^2).
    pub c_fc: f64,
    pub c_cl: f64,
    /// Leakage per domain, W / V.
    pub static_fc: f64,
    pub static_cl: f64,
    /// FC activity when not driving a transfer (clocked but idle).
    pub fc_idle_activity: f64,
    /// Cluster activity with a single busy core, relative to all eight.
    pub cl_floor_activity: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            eta_peak: 15.6,
            cores: 8.0,
            im2col_cpe: 1.0,
            out_cpe: 4.0,
            tile_overhead: 400.0,
            dma_bytes_per_fc_cycle: 0.5,
            c_fc: 4.8e-11,
            c_cl: 2.5e-10,
            static_fc: 0.3e-3,
            static_cl: 1.5e-3,
            fc_idle_activity: 0.4,
            cl_floor_activity: 0.3,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("eta_peak", self.eta_peak),
            ("cores", self.cores),
            ("im2col_cpe", self.im2col_cpe),
            ("out_cpe", self.out_cpe),
            ("tile_overhead", self.tile_overhead),
            ("dma_bytes_per_fc_cycle", self.dma_bytes_per_fc_cycle),
            ("c_fc", self.c_fc),
            ("c_cl", self.c_cl),
            ("static_fc", self.static_fc),
            ("static_cl", self.static_cl),
            ("fc_idle_activity", self.fc_idle_activity),
            ("cl_floor_activity", self.cl_floor_activity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::Params(format!("{name} = {v} must be positive")));
            }
        }
        if self.fc_idle_activity > 1.0 || self.cl_floor_activity > 1.0 {
            return Err(CostError::Params("activity factors must be at most 1".into()));
        }
        Ok(())
    }

    /// Fraction of core time doing useful work when `positions` output
    /// pixels are dealt out to the cores in equal chunks. Falls off once a
    /// layer has fewer positions than cores (a 3x2 map keeps 6 of 8 busy).
    pub fn utilization(&self, positions: usize) -> f64 {
        let n = positions.max(1) as f64;
        n / (self.cores * (n / self.cores).ceil())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub name: String,
    pub macs: usize,
    pub compute_cycles: f64,
    /// FC cycles spent streaming the next node's weights.
    pub dma_cycles: f64,
    /// Cluster cycles spent waiting for the stream.
    pub idle_cycles: f64,
    pub compute_s: f64,
    pub stream_s: f64,
    pub wall_s: f64,
    /// Achieved MAC per cluster cycle.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub op: OperatingPoint,
    pub nodes: Vec<NodeCost>,
    pub latency_s: f64,
    pub fps: f64,
    pub mw_fc: f64,
    pub mw_cl: f64,
    pub mj_frame: f64,
}

impl CostEstimate {
    pub fn power_mw(&self) -> f64 {
        self.mw_fc + self.mw_cl
    }

    pub fn idle_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.idle_cycles > 0.0).count()
    }
}

#[derive(Debug, Clone)]
struct LayerWork {
    macs: f64,
    im2col: f64,
    outs: f64,
    tiles: f64,
    positions: usize,
}

#[derive(Debug, Clone)]
struct NodeWork {
    name: String,
    macs: usize,
    layers: Vec<LayerWork>,
    stream_bytes: f64,
}

/// A plan reduced to the per-node quantities the model needs.
#[derive(Debug, Clone)]
pub struct Workload {
    nodes: Vec<NodeWork>,
}

impl Workload {
    pub fn new(g: &NetGraph, plan: &DeploymentPlan) -> Self {
        let n_nodes = plan.occupancy.len();
        let nodes = plan
            .occupancy
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let layers = o
                    .layers
                    .iter()
                    .filter_map(|&i| {
                        let l = &g.layers[i];
                        let tiles = plan.tilings.iter().find(|t| t.layer == i).map_or(0, |t| t.tiles.len()) as f64;
                        let outs = l.out_shape.elems() as f64;
                        match l.kind {
                            LayerKind::Conv2d => Some(LayerWork {
                                macs: l.macs() as f64,
                                im2col: (l.out_shape.h * l.out_shape.w * l.kernel.0 * l.kernel.1 * l.in_ch) as f64,
                                outs,
                                tiles,
                                positions: l.out_shape.h * l.out_shape.w,
                            }),
                            LayerKind::FullyConnected => {
                                Some(LayerWork { macs: l.macs() as f64, im2col: 0.0, outs, tiles, positions: 1 })
                            }
                            LayerKind::MaxPool => Some(LayerWork {
                                macs: 0.0,
                                im2col: 0.0,
                                outs: l.in_shape.elems() as f64,
                                tiles,
                                positions: l.out_shape.h * l.out_shape.w,
                            }),
                            _ => None,
                        }
                    })
                    .collect();
                // the last node prefetches the first node's weights for the next frame
                let stream_bytes = match plan.policy {
                    WeightPolicy::ResidentL2 => 0,
                    WeightPolicy::StreamedL3 if k + 1 < n_nodes => o.weights_next,
                    WeightPolicy::StreamedL3 if n_nodes > 1 => plan.occupancy[0].l3_weights,
                    WeightPolicy::StreamedL3 => 0,
                };
                NodeWork {
                    name: o.name.clone(),
                    macs: o.layers.iter().map(|&i| g.layers[i].macs()).sum(),
                    layers,
                    stream_bytes: stream_bytes as f64,
                }
            })
            .collect();
        Self { nodes }
    }

    pub fn macs(&self) -> usize {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    pub fn estimate(&self, op: &OperatingPoint, p: &CostParams) -> Result<CostEstimate, CostError> {
        op.check()?;
        p.validate()?;
        let (f_fc, f_cl, v) = (op.f_fc * 1e6, op.f_cl * 1e6, op.vdd);
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let (mut t_total, mut e_fc, mut e_cl) = (0.0, 0.0, 0.0);
        for n in &self.nodes {
            let mut cycles = 0.0;
            let mut active = 0.0;
            for l in &n.layers {
                let u = p.utilization(l.positions);
                let c = (l.macs / p.eta_peak + p.im2col_cpe * l.im2col + p.out_cpe * l.outs) / u + p.tile_overhead * l.tiles;
                cycles += c;
                active += c * (p.cl_floor_activity + (1.0 - p.cl_floor_activity) * u);
            }
            let dma_cycles = n.stream_bytes / p.dma_bytes_per_fc_cycle;
            let compute_s = cycles / f_cl;
            let stream_s = dma_cycles / f_fc;
            let wall_s = compute_s.max(stream_s);
            let idle_s = wall_s - compute_s;
            t_total += wall_s;
            // the cluster is clock gated while it waits
            e_cl += p.c_cl * v * v * active;
            e_fc += p.c_fc * v * v * f_fc * (stream_s + p.fc_idle_activity * (wall_s - stream_s));
            nodes.push(NodeCost {
                name: n.name.clone(),
                macs: n.macs,
                compute_cycles: cycles,
                dma_cycles,
                idle_cycles: idle_s * f_cl,
                compute_s,
                stream_s,
                wall_s,
                eta: if cycles > 0.0 { n.macs as f64 / cycles } else { 0.0 },
            });
        }
        if t_total <= 0.0 {
            return Err(CostError::Params("plan has no work".into()));
        }
        let mw_fc = 1e3 * (e_fc / t_total + p.static_fc * v);
        let mw_cl = 1e3 * (e_cl / t_total + p.static_cl * v);
        Ok(CostEstimate {
            op: *op,
            nodes,
            latency_s: t_total,
            fps: 1.0 / t_total,
            mw_fc,
            mw_cl,
            mj_frame: (mw_fc + mw_cl) * t_total,
        })
    }
}

pub fn estimate(g: &NetGraph, plan: &DeploymentPlan, op: &OperatingPoint, params: &CostParams) -> Result<CostEstimate, CostError> {
    Workload::new(g, plan).estimate(op, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<CostEstimate>,
    /// Index of the lowest-energy row.
    pub best_energy: usize,
    /// Index of the highest-throughput row.
    pub best_throughput: usize,
}

impl SweepResult {
    pub fn energy_optimum(&self) -> &CostEstimate {
        &self.rows[self.best_energy]
    }

    pub fn throughput_optimum(&self) -> &CostEstimate {
        &self.rows[self.best_throughput]
    }
}

/// Evaluates every grid point in parallel. Ties go to the earlier grid point.
pub fn sweep(g: &NetGraph, plan: &DeploymentPlan, grid: &[OperatingPoint], params: &CostParams) -> Result<SweepResult, CostError> {
    if grid.is_empty() {
        return Err(CostError::EmptyGrid);
    }
    let w = Workload::new(g, plan);
    let rows = grid.par_iter().map(|op| w.estimate(op, params)).collect::<Result<Vec<_>, _>>()?;
    let argbest = |key: &dyn Fn(&CostEstimate) -> f64| {
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            if key(r) < key(&rows[best]) {
                best = i;
            }
        }
        best
    };
    let best_energy = argbest(&|r| r.mj_frame);
    let best_throughput = argbest(&|r| -r.fps);
    Ok(SweepResult { rows, best_energy, best_throughput })
}

pub fn sweep_csv(s: &SweepResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["f_fc", "f_cl", "vdd", "fps", "mW_fc", "mW_cl", "mJ_frame"]).expect("in-memory write");
    for r in &s.rows {
        w.write_record([
            format!("{}", r.op.f_fc),
            format!("{}", r.op.f_cl),
            format!("{:.2}", r.op.vdd),
            format!("{:.3}", r.fps),
            format!("{:.4}", r.mw_fc),
            format!("{:.4}", r.mw_cl),
            format!("{:.5}", r.mj_frame),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// A measured operating point used to fit the model.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationTarget<'a> {
    pub workload: &'a Workload,
    pub op: OperatingPoint,
    pub fps: f64,
    pub mw: f64,
}

/// Serializable description of a measurement, resolved to a workload by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub net: Variant,
    pub policy: WeightPolicy,
    pub f_fc: f64,
    pub f_cl: f64,
    pub fps: f64,
    pub mw: f64,
}

/// Published silicon measurements: peak throughput of 80x32 and 160x16 at
/// the maximum clocks, and the minimum-power point of 80x32. 160x16 runs with
/// its weights resident in L2, the others stream them.
pub fn reference_anchors() -> Vec<Anchor> {
    vec![
        Anchor { net: Variant::W80C32, policy: WeightPolicy::StreamedL3, f_fc: 250.0, f_cl: 175.0, fps: 134.7, mw: 86.6 },
        Anchor { net: Variant::W160C16, policy: WeightPolicy::ResidentL2, f_fc: 250.0, f_cl: 175.0, fps: 110.7, mw: 99.0 },
        Anchor { net: Variant::W80C32, policy: WeightPolicy::StreamedL3, f_fc: 25.0, f_cl: 25.0, fps: 18.5, mw: 8.6 },
    ]
}

/// Plans each anchor's network under `mem` and fits `init` to the anchors.
pub fn calibrate_anchors(anchors: &[Anchor], mem: &MemoryHierarchy, init: &CostParams) -> Result<Calibration, CostError> {
    let workloads = anchors
        .iter()
        .map(|a| {
            let g = a.net.build();
            let p = plan(&g, mem, PlanOptions { policy: a.policy, fuse_pool: true })?;
            Ok(Workload::new(&g, &p))
        })
        .collect::<Result<Vec<_>, CostError>>()?;
    let targets = anchors
        .iter()
        .zip(&workloads)
        .map(|(a, w)| Ok(CalibrationTarget { workload: w, op: OperatingPoint::new(a.f_fc, a.f_cl)?, fps: a.fps, mw: a.mw }))
        .collect::<Result<Vec<_>, CostError>>()?;
    calibrate_params(&targets, init)
}

/// Parameters adjusted by [`calibrate_params`]; the rest keep their initial values.
pub const FITTED: [&str; 5] = ["eta_peak", "im2col_cpe", "dma_bytes_per_fc_cycle", "c_cl", "static_cl"];

fn pack(p: &CostParams) -> DVector<f64> {
    DVector::from_vec(vec![
        p.eta_peak.ln(),
        p.im2col_cpe.ln(),
        p.dma_bytes_per_fc_cycle.ln(),
        p.c_cl.ln(),
        p.static_cl.ln(),
    ])
}

fn unpack(x: &DVector<f64>, base: &CostParams) -> CostParams {
    CostParams {
        eta_peak: x[0].exp(),
        im2col_cpe: x[1].exp(),
        dma_bytes_per_fc_cycle: x[2].exp(),
        c_cl: x[3].exp(),
        static_cl: x[4].exp(),
        ..base.clone()
    }
}

/// Relative residual `(model - measured) / measured` for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub fps: f64,
    pub mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CostParams,
    pub residuals: Vec<Residual>,
    pub rms: f64,
    pub iterations: usize,
    pub singular_values: Vec<f64>,
}

fn residuals(targets: &[CalibrationTarget], p: &CostParams) -> Result<DVector<f64>, CostError> {
    let mut r = Vec::with_capacity(2 * targets.len());
    for t in targets {
        let e = t.workload.estimate(&t.op, p)?;
        r.push(e.fps / t.fps - 1.0);
        r.push(e.power_mw() / t.mw - 1.0);
    }
    Ok(DVector::from_vec(r))
}

fn jacobian(targets: &[CalibrationTarget], x: &DVector<f64>, base: &CostParams) -> Result<DMatrix<f64>, CostError> {
    let h = 1e-6;
    let mut j = DMatrix::zeros(2 * targets.len(), x.len());
    for k in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[k] += h;
        xm[k] -= h;
        let d = (residuals(targets, &unpack(&xp, base))? - residuals(targets, &unpack(&xm, base))?) / (2.0 * h);
        j.set_column(k, &d);
    }
    Ok(j)
}

/// Levenberg-Marquardt fit of the [`FITTED`] parameters (in log space, so
/// they stay positive) minimizing relative throughput and power error.
pub fn calibrate_params(targets: &[CalibrationTarget], init: &CostParams) -> Result<Calibration, CostError> {
    if targets.len() < 3 {
        return Err(CostError::TooFewTargets(targets.len()));
    }
    init.validate()?;
    let mut x = pack(init);
    let mut r = residuals(targets, init)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let j = jacobian(targets, &x, init)?;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(ch) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = ch.solve(&(-&g));
            let xn = &x + &step;
            // steps that leave the valid parameter region count as failures
            let Ok(rn) = residuals(targets, &unpack(&xn, init)) else {
                lambda *= 4.0;
                continue;
            };
            let cn = rn.norm_squared();
            if cn.is_finite() && cn < cost {
                let small = step.amax() < 1e-12 || cost - cn < 1e-16 * cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 4.0;
        }
        if !improved || cost < 1e-24 {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(CostError::Diverged(format!("residual norm {cost}")));
    }
    let j = jacobian(targets, &x, init)?;
    let sv = j.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > smax * 1e-8).count();
    let mut singular: Vec<f64> = sv.iter().copied().collect();
    singular.sort_by(|a, b| b.total_cmp(a));
    if rank < x.len() {
        return Err(CostError::RankDeficient { rank, params: x.len(), singular });
    }
    let residuals = r.as_slice().chunks(2).map(|c| Residual { fps: c[0], mw: c[1] }).collect();
    Ok(Calibration { params: unpack(&x, init), residuals, rms: (cost / r.len() as f64).sqrt(), iterations, singular_values: singular })
}
