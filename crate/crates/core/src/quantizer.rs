//! Post-training calibration and float-to-integer graph conversion.
//!
//! Calibration runs the float model over a set of images and records the
//! largest ReLU output per activation layer (`alpha`). Conversion then
//! decomposes every weight tensor on its per-layer grid and folds batch-norm
//! plus the activation step into one integer affine per output channel.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::float::float_forward;
use crate::graph::{GraphError, LayerKind, NetGraph};
use crate::tensor::{
    self, act_eps, decompose_weights, decompose_weights_nearest, weight_eps, QTensor, QuantError, RTensor, Requant, TensorFormatError,
};

/// Step of the 8-bit input image (pixels map to `[0, 1]`).
pub const INPUT_EPS: f64 = 1.0 / 255.0;
/// Variance epsilon of the batch-norm layers.
pub const BN_EPS: f64 = 1e-5;
/// Largest accepted relative error between fitted and exact requant scales.
pub const REQUANT_REL_TOL: f64 = 1.0 / 32768.0;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("dead activations (alpha = 0) in layers {0:?}")]
    DeadActivations(Vec<String>),
    #[error("layer {layer}: requant rescaling failed: {reason}")]
    Rescale { layer: String, reason: String },
    #[error("layer {layer}: {reason}")]
    Params { layer: String, reason: String },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration input {index} has shape {got:?}, graph expects {expected:?}")]
    InputShape { index: usize, got: Vec<usize>, expected: Vec<usize> },
    #[error("expected {expected} alphas, got {got}")]
    AlphaCount { expected: usize, got: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] TensorFormatError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> QuantizerError + '_ {
    move |source| QuantizerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels], mean: vec![0.0; channels], var: vec![1.0 - BN_EPS as f32; channels] }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `(scale, shift)` with `bn(z) = scale * z + shift`.
    pub fn affine(&self, c: usize) -> (f64, f64) {
        let inv = 1.0 / (self.var[c] as f64 + BN_EPS).sqrt();
        let scale = self.gamma[c] as f64 * inv;
        (scale, self.beta[c] as f64 - scale * self.mean[c] as f64)
    }
}

/// Float parameters of one weighted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatLayer {
    pub weight: RTensor,
    /// Present for convolutions; applied by the following activation layer.
    pub bn: Option<BatchNorm>,
}

/// A graph together with float weights, aligned with `graph.layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub graph: NetGraph,
    pub params: Vec<Option<FloatLayer>>,
}

impl FloatModel {
    pub fn new(graph: NetGraph, params: Vec<Option<FloatLayer>>) -> Result<Self, QuantizerError> {
        graph.validate()?;
        let m = Self { graph, params };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), QuantizerError> {
        if self.params.len() != self.graph.layers.len() {
            return Err(QuantizerError::Params {
                layer: "<graph>".into(),
                reason: format!("{} parameter slots for {} layers", self.params.len(), self.graph.layers.len()),
            });
        }
        for (l, p) in self.graph.layers.iter().zip(&self.params) {
            let bad = |reason: String| QuantizerError::Params { layer: l.name.clone(), reason };
            match (l.weight_shape(), p) {
                (Some(shape), Some(fl)) => {
                    if fl.weight.shape() != shape.as_slice() {
                        return Err(bad(format!("weight shape {:?}, expected {shape:?}", fl.weight.shape())));
                    }
                    if l.kind == LayerKind::Conv2d {
                        match &fl.bn {
                            Some(bn) if bn.channels() == l.out_ch
                                && bn.beta.len() == l.out_ch
                                && bn.mean.len() == l.out_ch
                                && bn.var.len() == l.out_ch => {}
                            _ => return Err(bad("missing or mis-sized batch-norm".into())),
                        }
                    }
                }
                (Some(_), None) => return Err(bad("missing weights".into())),
                (None, Some(_)) => return Err(bad("unexpected weights".into())),
                (None, None) => {}
            }
        }
        Ok(())
    }

    /// Seeded synthetic weights: He-style normal weights scaled by fan-in,
    /// mild random batch-norm statistics.
    pub fn random(graph: NetGraph, seed: u64) -> Result<Self, QuantizerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .layers
            .iter()
            .map(|l| {
                let shape = l.weight_shape()?;
                let fan_in: usize = shape[1..].iter().product();
                let gain = if l.kind == LayerKind::FullyConnected { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                let weight = RTensor::new(shape, data).expect("finite");
                let bn = (l.kind == LayerKind::Conv2d).then(|| {
                    let c = l.out_ch;
                    BatchNorm {
                        gamma: (0..c).map(|_| rng.gen_range(0.8..1.2)).collect(),
                        beta: (0..c).map(|_| rng.gen_range(0.0..0.2)).collect(),
                        mean: (0..c).map(|_| rng.gen_range(-0.05..0.05)).collect(),
                        var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
                    }
                });
                Some(FloatLayer { weight, bn })
            })
            .collect();
        Self::new(graph, params)
    }

    /// Writes one QTNS file per weight tensor (`NN_name.weight.qtns`) and per
    /// batch-norm (`NN_name.bn.qtns`, rows gamma/beta/mean/var).
    pub fn save_weights(&self, dir: &Path) -> Result<(), QuantizerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, (l, p)) in self.graph.layers.iter().zip(&self.params).enumerate() {
            let Some(p) = p else { continue };
            tensor::write_rtensor(&dir.join(weight_file(i, &l.name)), &p.weight)?;
            if let Some(bn) = &p.bn {
                let data = [&bn.gamma, &bn.beta, &bn.mean, &bn.var].into_iter().flatten().copied().collect();
                tensor::write_rtensor(&dir.join(bn_file(i, &l.name)), &RTensor::new(vec![4, bn.channels()], data)?)?;
            }
        }
        Ok(())
    }

    pub fn load_weights(graph: NetGraph, dir: &Path) -> Result<Self, QuantizerError> {
        let mut params = Vec::with_capacity(graph.layers.len());
        for (i, l) in graph.layers.iter().enumerate() {
            if !l.has_weights() {
                params.push(None);
                continue;
            }
            let real = |file: String| -> Result<RTensor, QuantizerError> {
                tensor::read_tensor(&dir.join(&file))?.into_real().ok_or_else(|| QuantizerError::Params {
                    layer: l.name.clone(),
                    reason: format!("{file} is not a float tensor"),
                })
            };
            let weight = real(weight_file(i, &l.name))?;
            let bn = if l.kind == LayerKind::Conv2d {
                let t = real(bn_file(i, &l.name))?;
                let c = t.len() / 4;
                let row = |r: usize| t.data()[r * c..(r + 1) * c].to_vec();
                Some(BatchNorm { gamma: row(0), beta: row(1), mean: row(2), var: row(3) })
            } else {
                None
            };
            params.push(Some(FloatLayer { weight, bn }));
        }
        Self::new(graph, params)
    }

    /// Layer indices of the activation (ReLU) layers, in order.
    pub fn activation_layers(&self) -> Vec<usize> {
        activation_layers(&self.graph)
    }
}

fn weight_file(i: usize, name: &str) -> String {
    format!("{i:02}_{name}.weight.qtns")
}

fn bn_file(i: usize, name: &str) -> String {
    format!("{i:02}_{name}.bn.qtns")
}

pub fn activation_layers(g: &NetGraph) -> Vec<usize> {
    g.layers.iter().enumerate().filter(|(_, l)| l.kind == LayerKind::RequantAct).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Vec<RTensor>,
}

impl CalibrationSet {
    pub fn new(inputs: Vec<RTensor>) -> Self {
        Self { inputs }
    }

    pub fn size(&self) -> usize {
        self.inputs.len()
    }
}

/// Maximum ReLU output of every activation layer over the calibration set,
/// in activation-layer order.
pub fn calibrate(model: &FloatModel, calib: &CalibrationSet) -> Result<Vec<f64>, QuantizerError> {
    if calib.inputs.is_empty() {
        return Err(QuantizerError::EmptyCalibration);
    }
    let g = &model.graph;
    let expected = vec![g.input_shape.c, g.input_shape.h, g.input_shape.w];
    for (index, t) in calib.inputs.iter().enumerate() {
        if t.shape() != expected.as_slice() {
            return Err(QuantizerError::InputShape { index, got: t.shape().to_vec(), expected: expected.clone() });
        }
    }
    let acts = model.activation_layers();
    let alphas = calib
        .inputs
        .par_iter()
        .map(|img| {
            let (_, outs) = float_forward(model, img, true);
            acts.iter().map(|&i| outs[i].data().iter().fold(0.0f64, |m, &v| m.max(v as f64))).collect::<Vec<_>>()
        })
        .reduce(|| vec![0.0; acts.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect());
    let dead: Vec<String> =
        acts.iter().zip(&alphas).filter(|(_, &a)| !(a > 0.0)).map(|(&i, _)| g.layers[i].name.clone()).collect();
    if !dead.is_empty() {
        return Err(QuantizerError::DeadActivations(dead));
    }
    Ok(alphas)
}

/// Integer parameters of one weighted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    /// 128-level payload in `[-64, 63]`; `weights.qp().zero_base` is `w_star_min + 64`.
    pub weights: QTensor,
    pub w_star_min: i32,
    pub eps_in: f64,
    pub eps_w: f64,
    /// Step of the raw accumulator: `eps_in * eps_w`.
    pub acc_eps: f64,
    /// Requantization into the following activation; `None` for the final FC.
    pub requant: Option<Requant>,
    /// Step of the layer's materialized output.
    pub out_eps: f64,
}

impl QuantizedLayer {
    pub fn zero_base(&self) -> i32 {
        self.weights.qp().zero_base
    }
}

/// Integer-deployable network, aligned with `graph.layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedGraph {
    pub graph: NetGraph,
    pub input_eps: f64,
    pub layers: Vec<Option<QuantizedLayer>>,
}

impl QuantizedGraph {
    /// Checks structure: every conv is followed by an activation and carries
    /// its requant; weight shapes match; requant sizes match channel counts.
    pub fn new(graph: NetGraph, input_eps: f64, layers: Vec<Option<QuantizedLayer>>) -> Result<Self, QuantizerError> {
        graph.validate()?;
        let qg = Self { graph, input_eps, layers };
        qg.check()?;
        Ok(qg)
    }

    fn check(&self) -> Result<(), QuantizerError> {
        let g = &self.graph;
        if self.layers.len() != g.layers.len() {
            return Err(QuantizerError::Params { layer: "<graph>".into(), reason: "layer count mismatch".into() });
        }
        for (i, (l, q)) in g.layers.iter().zip(&self.layers).enumerate() {
            let bad = |reason: &str| QuantizerError::Params { layer: l.name.clone(), reason: reason.into() };
            match l.kind {
                LayerKind::Conv2d | LayerKind::FullyConnected => {
                    let q = q.as_ref().ok_or_else(|| bad("missing quantized weights"))?;
                    if Some(q.weights.shape().to_vec()) != l.weight_shape() {
                        return Err(bad("weight shape mismatch"));
                    }
                    let next_is_act = g.layers.get(i + 1).is_some_and(|n| n.kind == LayerKind::RequantAct);
                    match (&q.requant, l.kind) {
                        (Some(rq), LayerKind::Conv2d) if next_is_act => {
                            if rq.multipliers.len() != l.out_ch || rq.biases.len() != l.out_ch || rq.shift > 31 {
                                return Err(bad("requant parameters do not match channel count"));
                            }
                        }
                        (None, LayerKind::FullyConnected) if i + 1 == g.layers.len() => {}
                        (_, LayerKind::Conv2d) => return Err(bad("convolution must be followed by an activation")),
                        _ => return Err(bad("fully connected layer must be last and produce raw accumulators")),
                    }
                }
                LayerKind::RequantAct
                    if (i == 0 || g.layers[i - 1].kind != LayerKind::Conv2d) => {
                        return Err(bad("activation must follow a convolution"));
                    }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output steps of the final layer's raw values.
    pub fn output_eps(&self) -> f64 {
        let mut eps = self.input_eps;
        for q in self.layers.iter().flatten() {
            eps = q.out_eps;
        }
        eps
    }

    /// Writes the JSON document plus one QTNS file per weight tensor in
    /// `<stem>.weights/`, referenced by relative path.
    pub fn save(&self, path: &Path) -> Result<(), QuantizerError> {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("qgraph");
        let wdir_name = format!("{stem}.weights");
        let parent = path.parent().unwrap_or(Path::new("."));
        let wdir = parent.join(&wdir_name);
        fs::create_dir_all(&wdir).map_err(io_err(&wdir))?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (l, q)) in self.graph.layers.iter().zip(&self.layers).enumerate() {
            layers.push(match q {
                None => None,
                Some(q) => {
                    let file = format!("{i:02}_{}.qtns", l.name);
                    tensor::write_qtensor(&wdir.join(&file), &q.weights)?;
                    Some(LayerDoc {
                        weight_file: format!("{wdir_name}/{file}"),
                        w_star_min: q.w_star_min,
                        eps_in: q.eps_in,
                        eps_w: q.eps_w,
                        acc_eps: q.acc_eps,
                        requant: q.requant.clone(),
                        out_eps: q.out_eps,
                    })
                }
            });
        }
        let doc = QGraphDoc { graph: self.graph.clone(), input_eps: self.input_eps, layers };
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(path, text).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QuantizerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let doc: QGraphDoc = serde_json::from_str(&text)?;
        let parent = path.parent().unwrap_or(Path::new("."));
        let mut layers = Vec::with_capacity(doc.layers.len());
        for d in doc.layers {
            layers.push(match d {
                None => None,
                Some(d) => {
                    let weights = tensor::read_tensor(&parent.join(&d.weight_file))?.into_int().ok_or_else(|| {
                        QuantizerError::Params { layer: d.weight_file.clone(), reason: "not an integer tensor".into() }
                    })?;
                    Some(QuantizedLayer {
                        weights,
                        w_star_min: d.w_star_min,
                        eps_in: d.eps_in,
                        eps_w: d.eps_w,
                        acc_eps: d.acc_eps,
                        requant: d.requant,
                        out_eps: d.out_eps,
                    })
                }
            });
        }
        Self::new(doc.graph, doc.input_eps, layers)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weight_file: String,
    w_star_min: i32,
    eps_in: f64,
    eps_w: f64,
    acc_eps: f64,
    requant: Option<Requant>,
    out_eps: f64,
}

#[derive(Serialize, Deserialize)]
struct QGraphDoc {
    graph: NetGraph,
    input_eps: f64,
    layers: Vec<Option<LayerDoc>>,
}

/// Fits `multiplier / 2^shift` to each real scale and `bias / 2^shift` to
/// each real offset, using the largest shift that keeps every parameter in
/// 32 bits.
pub fn fit_requant(scales: &[f64], offsets: &[f64]) -> Result<Requant, String> {
    let fits = |v: f64| v.abs() <= i32::MAX as f64;
    for shift in (0..=31u32).rev() {
        let k = (1u64 << shift) as f64;
        let m: Vec<f64> = scales.iter().map(|s| (s * k).round()).collect();
        let b: Vec<f64> = offsets.iter().map(|o| (o * k).round()).collect();
        if m.iter().chain(&b).all(|&v| fits(v)) {
            return Ok(Requant {
                multipliers: m.into_iter().map(|v| v as i32).collect(),
                biases: b.into_iter().map(|v| v as i32).collect(),
                shift,
            });
        }
    }
    Err("parameters overflow 32 bits even without shift".into())
}

/// Grid used when decomposing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRounding {
    /// Truncate toward the grid point below; error in `[0, eps_w)`.
    Floor,
    /// Nearest grid point; error within `eps_w / 2` and unbiased.
    #[default]
    Nearest,
}

/// Converts a calibrated float model into an integer graph with the default
/// (nearest) weight rounding.
pub fn convert(model: &FloatModel, alphas: &[f64]) -> Result<QuantizedGraph, QuantizerError> {
    convert_with(model, alphas, WeightRounding::default())
}

pub fn convert_with(model: &FloatModel, alphas: &[f64], rounding: WeightRounding) -> Result<QuantizedGraph, QuantizerError> {
    let g = &model.graph;
    let acts = model.activation_layers();
    if alphas.len() != acts.len() {
        return Err(QuantizerError::AlphaCount { expected: acts.len(), got: alphas.len() });
    }
    let mut eps = INPUT_EPS;
    let mut layers: Vec<Option<QuantizedLayer>> = vec![None; g.layers.len()];
    for (i, l) in g.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv2d | LayerKind::FullyConnected => {
                let fl = model.params[i].as_ref().expect("checked at construction");
                let (lo, hi) = fl.weight.min_max().unwrap_or((0.0, 0.0));
                let eps_w = weight_eps(lo as f64, hi as f64)?;
                let (weights, w_star_min) = match rounding {
                    WeightRounding::Floor => decompose_weights(&fl.weight, eps_w)?,
                    WeightRounding::Nearest => decompose_weights_nearest(&fl.weight, eps_w)?,
                };
                let acc_eps = eps * eps_w;
                let (requant, out_eps) = if l.kind == LayerKind::Conv2d {
                    let k = acts.iter().position(|&a| a == i + 1).ok_or_else(|| QuantizerError::Params {
                        layer: l.name.clone(),
                        reason: "convolution not followed by an activation".into(),
                    })?;
                    let out_eps = act_eps(alphas[k])?;
                    let bn = fl.bn.as_ref().expect("checked at construction");
                    let (scales, offsets): (Vec<f64>, Vec<f64>) = (0..l.out_ch)
                        .map(|c| {
                            let (s, b) = bn.affine(c);
                            (s * acc_eps / out_eps, b / out_eps)
                        })
                        .unzip();
                    let rq = fit_requant(&scales, &offsets)
                        .map_err(|reason| QuantizerError::Rescale { layer: l.name.clone(), reason })?;
                    for (c, &s) in scales.iter().enumerate() {
                        let rel = if s == 0.0 { 0.0 } else { (rq.scale(c) - s).abs() / s.abs() };
                        if rel > REQUANT_REL_TOL {
                            return Err(QuantizerError::Rescale {
                                layer: l.name.clone(),
                                reason: format!("channel {c}: relative scale error {rel:.3e} above 2^-15"),
                            });
                        }
                    }
                    (Some(rq), out_eps)
                } else {
                    (None, acc_eps)
                };
                layers[i] = Some(QuantizedLayer { weights, w_star_min, eps_in: eps, eps_w, acc_eps, requant, out_eps });
                eps = out_eps;
            }
            _ => {}
        }
    }
    QuantizedGraph::new(g.clone(), INPUT_EPS, layers)
}
