//! Integer inference executor and a float reference.
//!
//! The integer path keeps activations in HWC order so a convolution's inner
//! loop is a contiguous dot product over input channels. Work is split over
//! output rows; each row is owned by exactly one worker and integer sums are
//! formed in a fixed order, so results never depend on the thread count.

pub mod float;

use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{LayerKind, LayerSpec, Shape3, Variant};
use crate::image::{resize_bilinear, GrayImage, ImageError};
use crate::pose::Pose;
use crate::quantizer::{FloatModel, QuantizedGraph, INPUT_EPS};
use crate::tensor::{requant_value, QTensor, QuantParams, RTensor};

pub use float::{float_forward, infer_float};

/// Raw frames delivered by the camera loop.
pub const FRAME_SIZE: usize = 162;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("input shape {got:?}, graph expects {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("layer {layer}: accumulator overflow")]
    Overflow { layer: String },
    #[error("layer {layer}: requant overflow in channel {channel}")]
    RequantOverflow { layer: String, channel: usize },
    #[error("input values must be 8-bit unsigned")]
    InputRange,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// Final layer output (four 32-bit fixed-point values for pose networks).
    pub raw: Vec<i32>,
    /// Step of every raw value.
    pub output_eps: f64,
    /// `output_eps * raw`, present when the network has four outputs.
    pub pose: Option<Pose>,
    /// Per-layer outputs in `(C, H, W)` order when requested.
    pub snapshots: Vec<QTensor>,
}

impl InferenceResult {
    pub fn values(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| r as f64 * self.output_eps).collect()
    }
}

pub fn pose_of(values: &[f64]) -> Option<Pose> {
    <[f64; 4]>::try_from(values).ok().map(Pose::from_components)
}

enum Prepared {
    /// Conv weights reordered to `[co][ky][kx][ci]`; FC weights reordered to
    /// match the HWC activation layout. `fast` when no sum can leave i32.
    Weighted { w: Vec<i32>, zb: i32, fast: bool },
    Plain,
}

/// Immutable executor over one quantized graph; `infer` may be called from
/// many threads at once.
pub struct IntEngine<'a> {
    qg: &'a QuantizedGraph,
    prepared: Vec<Prepared>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> IntEngine<'a> {
    pub fn new(qg: &'a QuantizedGraph) -> Self {
        let prepared = qg
            .graph
            .layers
            .iter()
            .zip(&qg.layers)
            .map(|(l, q)| match q {
                Some(q) => prepare(l, q.weights.data(), q.zero_base()),
                None => Prepared::Plain,
            })
            .collect();
        Self { qg, prepared, pool: None }
    }

    /// Runs on a dedicated pool of `threads` workers instead of the global one.
    pub fn with_threads(mut self, threads: usize) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn graph(&self) -> &QuantizedGraph {
        self.qg
    }

    pub fn infer(&self, image: &QTensor) -> Result<InferenceResult, EngineError> {
        self.run(image, false)
    }

    /// Like `infer`, also returning every layer's output.
    pub fn infer_with_snapshots(&self, image: &QTensor) -> Result<InferenceResult, EngineError> {
        self.run(image, true)
    }

    fn run(&self, image: &QTensor, snapshots: bool) -> Result<InferenceResult, EngineError> {
        match &self.pool {
            Some(p) => p.install(|| self.run_inner(image, snapshots)),
            None => self.run_inner(image, snapshots),
        }
    }

    fn run_inner(&self, image: &QTensor, keep: bool) -> Result<InferenceResult, EngineError> {
        let g = &self.qg.graph;
        let s = g.input_shape;
        let expected = vec![s.c, s.h, s.w];
        if image.shape() != expected.as_slice() {
            return Err(EngineError::InputShape { got: image.shape().to_vec(), expected });
        }
        if image.data().iter().any(|&v| !(0..=255).contains(&v)) {
            return Err(EngineError::InputRange);
        }
        let mut act: Vec<u8> = chw_to_hwc(image.data(), s).into_iter().map(|v| v as u8).collect();
        let mut acc: Vec<i32> = Vec::new();
        let mut eps = self.qg.input_eps;
        let mut snaps = Vec::new();
        let mut raw_out = false;
        for (i, l) in g.layers.iter().enumerate() {
            let q = self.qg.layers[i].as_ref();
            match (l.kind, &self.prepared[i]) {
                (LayerKind::Conv2d, Prepared::Weighted { w, zb, fast }) => {
                    acc = conv_hwc(l, &act, w, *zb, *fast)?;
                    eps = q.expect("weighted").acc_eps;
                    raw_out = true;
                }
                (LayerKind::RequantAct, _) => {
                    let rq = self.qg.layers[i - 1].as_ref().and_then(|q| q.requant.as_ref()).expect("validated");
                    act = requant_hwc(&acc, l.out_shape.c, rq.multipliers.as_slice(), &rq.biases, rq.shift)
                        .map_err(|channel| EngineError::RequantOverflow { layer: l.name.clone(), channel })?;
                    eps = self.qg.layers[i - 1].as_ref().expect("validated").out_eps;
                    raw_out = false;
                }
                (LayerKind::MaxPool, _) => act = maxpool_hwc(l, &act),
                (LayerKind::DropoutNoop, _) => {}
                (LayerKind::FullyConnected, Prepared::Weighted { w, zb, fast }) => {
                    acc = fc(l, &act, w, *zb, *fast)?;
                    eps = q.expect("weighted").acc_eps;
                    raw_out = true;
                }
                _ => unreachable!("weighted layers are prepared"),
            }
            if keep {
                let o = l.out_shape;
                let (data, qp) = if raw_out {
                    (hwc_to_chw(&acc, o), QuantParams::accumulator(eps))
                } else {
                    (hwc_to_chw(&act.iter().map(|&v| v as i32).collect::<Vec<_>>(), o), QuantParams::activation(eps))
                };
                snaps.push(QTensor::new(vec![o.c, o.h, o.w], data, qp).expect("in range by construction"));
            }
        }
        let o = g.output_shape();
        let raw = if raw_out { hwc_to_chw(&acc, o) } else { hwc_to_chw(&act.iter().map(|&v| v as i32).collect::<Vec<_>>(), o) };
        let values: Vec<f64> = raw.iter().map(|&r| r as f64 * eps).collect();
        Ok(InferenceResult { pose: pose_of(&values), raw, output_eps: eps, snapshots: snaps })
    }
}

/// One-shot integer inference.
pub fn infer_int(qg: &QuantizedGraph, image: &QTensor) -> Result<InferenceResult, EngineError> {
    IntEngine::new(qg).infer(image)
}

fn prepare(l: &LayerSpec, w: &[i32], zb: i32) -> Prepared {
    let (w, fan_in) = match l.kind {
        LayerKind::Conv2d => {
            let (ci_n, (kh, kw)) = (l.in_ch, l.kernel);
            let mut r = vec![0; w.len()];
            for co in 0..l.out_ch {
                for ci in 0..ci_n {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            r[((co * kh + ky) * kw + kx) * ci_n + ci] = w[((co * ci_n + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            (r, ci_n * kh * kw)
        }
        _ => {
            // FC rows index the (C, H, W) flattening; reorder to (H, W, C).
            let s = l.in_shape;
            let n = s.elems();
            let mut r = vec![0; w.len()];
            for o in 0..l.out_ch {
                let row = &w[o * n..(o + 1) * n];
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            r[o * n + (y * s.w + x) * s.c + c] = row[(c * s.h + y) * s.w + x];
                        }
                    }
                }
            }
            (r, n)
        }
    };
    let row_len = fan_in.max(1);
    let worst_dot = w.chunks(row_len).map(|r| r.iter().map(|v| v.unsigned_abs() as i64).sum::<i64>()).max().unwrap_or(0) * 255;
    let worst_base = zb.unsigned_abs() as i64 * 255 * fan_in as i64;
    let fast = worst_dot + worst_base <= i32::MAX as i64;
    Prepared::Weighted { w, zb, fast }
}

fn chw_to_hwc(v: &[i32], s: Shape3) -> Vec<i32> {
    let mut out = vec![0; v.len()];
    for c in 0..s.c {
        for p in 0..s.h * s.w {
            out[p * s.c + c] = v[c * s.h * s.w + p];
        }
    }
    out
}

fn hwc_to_chw(v: &[i32], s: Shape3) -> Vec<i32> {
    let mut out = vec![0; v.len()];
    for p in 0..s.h * s.w {
        for c in 0..s.c {
            out[c * s.h * s.w + p] = v[p * s.c + c];
        }
    }
    out
}

/// `sum(w* . x) + zb * sum(x)` over one window, in i32.
#[inline]
fn dot<const CHECKED: bool>(w: &[i32], x: &[u8]) -> Option<(i32, i32)> {
    if CHECKED {
        let mut d: i32 = 0;
        let mut s: i32 = 0;
        for (&a, &b) in w.iter().zip(x) {
            d = d.checked_add(a.checked_mul(b as i32)?)?;
            s = s.checked_add(b as i32)?;
        }
        Some((d, s))
    } else {
        let d = w.iter().zip(x).map(|(&a, &b)| a * b as i32).sum();
        let s = x.iter().map(|&b| b as i32).sum();
        Some((d, s))
    }
}

fn conv_hwc(l: &LayerSpec, x: &[u8], w: &[i32], zb: i32, fast: bool) -> Result<Vec<i32>, EngineError> {
    let o = l.out_shape;
    let mut out = vec![0i32; o.elems()];
    let res = out.par_chunks_mut(o.w * o.c).enumerate().try_for_each(|(oy, row)| {
        if fast {
            conv_row::<false>(l, x, w, zb, oy, row)
        } else {
            conv_row::<true>(l, x, w, zb, oy, row)
        }
    });
    res.ok_or_else(|| EngineError::Overflow { layer: l.name.clone() })?;
    Ok(out)
}

fn conv_row<const CHECKED: bool>(l: &LayerSpec, x: &[u8], w: &[i32], zb: i32, oy: usize, row: &mut [i32]) -> Option<()> {
    let Shape3 { c: ci_n, h: ih, w: iw } = l.in_shape;
    let co_n = l.out_shape.c;
    let ((kh, kw), (sh, sw), (ph, pw)) = (l.kernel, l.stride, l.padding);
    let ky_lo = ph.saturating_sub(oy * sh);
    let ky_hi = kh.min((ih + ph).saturating_sub(oy * sh));
    for (ox, px) in row.chunks_mut(co_n).enumerate() {
        let kx_lo = pw.saturating_sub(ox * sw);
        let kx_hi = kw.min((iw + pw).saturating_sub(ox * sw));
        let span = (kx_hi - kx_lo) * ci_n;
        for (co, out) in px.iter_mut().enumerate() {
            let mut d: i32 = 0;
            let mut s: i32 = 0;
            for ky in ky_lo..ky_hi {
                let iy = oy * sh + ky - ph;
                let ix0 = ox * sw + kx_lo - pw;
                let xs = &x[(iy * iw + ix0) * ci_n..][..span];
                let ws = &w[((co * kh + ky) * kw + kx_lo) * ci_n..][..span];
                let (dd, ss) = dot::<CHECKED>(ws, xs)?;
                if CHECKED {
                    d = d.checked_add(dd)?;
                    s = s.checked_add(ss)?;
                } else {
                    d += dd;
                    s += ss;
                }
            }
            *out = if CHECKED { d.checked_add(zb.checked_mul(s)?)? } else { d + zb * s };
        }
    }
    Some(())
}

/// Returns the offending channel on overflow.
fn requant_hwc(acc: &[i32], c: usize, m: &[i32], b: &[i32], shift: u32) -> Result<Vec<u8>, usize> {
    let mut out = vec![0u8; acc.len()];
    out.par_chunks_mut(c.max(1) * 256).zip(acc.par_chunks(c.max(1) * 256)).try_for_each(|(o, a)| -> Result<(), usize> {
        for (j, (ov, &av)) in o.iter_mut().zip(a).enumerate() {
            let ch = j % c;
            *ov = requant_value(av, m[ch], b[ch], shift).ok_or(ch)?;
        }
        Ok(())
    })?;
    Ok(out)
}

fn maxpool_hwc(l: &LayerSpec, x: &[u8]) -> Vec<u8> {
    let Shape3 { c, h: ih, w: iw } = l.in_shape;
    let o = l.out_shape;
    let ((kh, kw), (sh, sw)) = (l.kernel, l.stride);
    let mut out = vec![0u8; o.elems()];
    out.par_chunks_mut(o.w * c).enumerate().for_each(|(oy, row)| {
        for (ox, px) in row.chunks_mut(c).enumerate() {
            for iy in oy * sh..(oy * sh + kh).min(ih) {
                for ix in ox * sw..(ox * sw + kw).min(iw) {
                    let src = &x[(iy * iw + ix) * c..][..c];
                    px.iter_mut().zip(src).for_each(|(p, &v)| *p = (*p).max(v));
                }
            }
        }
    });
    out
}

fn fc(l: &LayerSpec, x: &[u8], w: &[i32], zb: i32, fast: bool) -> Result<Vec<i32>, EngineError> {
    let n = l.in_ch;
    let mut out = Vec::with_capacity(l.out_ch);
    for row in w.chunks(n) {
        let v = if fast {
            dot::<false>(row, x).map(|(d, s)| d + zb * s)
        } else {
            dot::<true>(row, x).and_then(|(d, s)| d.checked_add(zb.checked_mul(s)?))
        };
        out.push(v.ok_or_else(|| EngineError::Overflow { layer: l.name.clone() })?);
    }
    Ok(out)
}

/// Centered crop of a camera frame to a variant's input, with a 2x fixed-point
/// bilinear downscale of the 160x96 crop for 80-wide networks.
pub fn prepare_frame(frame: &GrayImage, variant: Variant) -> Result<GrayImage, EngineError> {
    let crop = frame.crop_center(160, 96)?;
    Ok(match variant.width() {
        160 => crop,
        w => resize_bilinear(&crop, w, variant.height()),
    })
}

/// Centered crop to `(height, width)` as an 8-bit input tensor.
pub fn crop_center(frame: &GrayImage, height: usize, width: usize) -> Result<QTensor, EngineError> {
    Ok(image_tensor(&frame.crop_center(width, height)?))
}

pub fn image_tensor(img: &GrayImage) -> QTensor {
    QTensor::from_u8(vec![1, img.height, img.width], &img.pixels, INPUT_EPS).expect("8-bit pixels")
}

/// Pixels mapped to `[0, 1]`, the float model's input convention.
pub fn image_rtensor(img: &GrayImage) -> RTensor {
    RTensor::new(vec![1, img.height, img.width], img.pixels.iter().map(|&p| p as f32 / 255.0).collect()).expect("finite")
}

/// First-order worst-case bound on `|int - float|` per output value.
///
/// Assumes float activations never exceed their calibrated `alpha` (true for
/// inputs drawn from the calibration set). Tracks a per-channel elementwise
/// error bound `e` and a magnitude bound `X` on the integer activations.
/// Each weighted row contributes `sum|W_q - W| * X` from weight rounding plus
/// `sum|W| * e` inherited error; each requant adds the multiplier fitting
/// error and one output step (the floor). The bound is rigorous, so it grows
/// geometrically with depth.
pub fn error_bound(model: &FloatModel, qg: &QuantizedGraph) -> Vec<f64> {
    let g = &qg.graph;
    let mut e = vec![0.0f64; g.input_shape.c];
    let mut x_max = 1.0f64;
    let mut z_err: Vec<f64> = Vec::new();
    let mut z_mag: Vec<f64> = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv2d | LayerKind::FullyConnected => {
                let q = qg.layers[i].as_ref().expect("weighted");
                let wf = model.params[i].as_ref().expect("weighted").weight.data();
                let wq = crate::tensor::dequantize(&q.weights);
                let fan_in = wf.len() / l.out_ch;
                // input channel of element k within a row
                let per_ch = match l.kind {
                    LayerKind::Conv2d => l.kernel.0 * l.kernel.1,
                    _ => l.in_shape.h * l.in_shape.w,
                };
                z_err = wf
                    .chunks(fan_in)
                    .zip(wq.data().chunks(fan_in))
                    .map(|(rf, rq)| {
                        rf.iter()
                            .zip(rq)
                            .enumerate()
                            .map(|(k, (&a, &b))| (a - b).abs() as f64 * x_max + a.abs() as f64 * e[k / per_ch])
                            .sum()
                    })
                    .collect();
                z_mag = wq.data().chunks(fan_in).map(|r| r.iter().map(|v| v.abs() as f64).sum::<f64>() * x_max).collect();
            }
            LayerKind::RequantAct => {
                let q = qg.layers[i - 1].as_ref().expect("validated");
                let rq = q.requant.as_ref().expect("validated");
                let bn = model.params[i - 1].as_ref().and_then(|p| p.bn.as_ref()).expect("validated");
                let step = (1u64 << rq.shift) as f64;
                e = (0..l.out_ch)
                    .map(|c| {
                        let (a, _) = bn.affine(c);
                        let exact = a * q.acc_eps / q.out_eps;
                        let rel = if exact == 0.0 { 0.0 } else { ((rq.scale(c) - exact) / exact).abs() };
                        a.abs() * (z_err[c] + rel * z_mag[c]) + q.out_eps * (1.0 + 1.0 / step)
                    })
                    .collect();
                x_max = 255.0 * q.out_eps;
            }
            _ => {}
        }
    }
    match g.layers.last().map(|l| l.kind) {
        Some(LayerKind::FullyConnected) | Some(LayerKind::Conv2d) => z_err,
        _ => {
            let plane = g.output_shape().h * g.output_shape().w;
            (0..g.output_shape().elems()).map(|k| e[k / plane]).collect()
        }
    }
}
