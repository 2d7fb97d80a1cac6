//! Fixed-point tensors and the per-layer quantization arithmetic.
//!
//! A quantized tensor stores integer codes `q` together with a scale `eps`
//! and an integer `zero_base`; its real value is `eps * (zero_base + q)`.
//! Activations use 256 unsigned levels, weights 128 signed levels and
//! accumulators the full signed 32-bit range.

mod io;

pub use io::{read_tensor, read_tensor_from, write_qtensor, write_rtensor, StoredTensor, TensorFormatError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of levels for activation tensors (8-bit unsigned).
pub const ACT_LEVELS: u64 = 256;
/// Number of levels for weight tensors (7-bit magnitude stored in signed 8-bit).
pub const WEIGHT_LEVELS: u64 = 128;
/// Number of levels for 32-bit accumulators.
pub const ACC_LEVELS: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("quantization step must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("degenerate layer: w_max ({w_max}) must exceed w_min ({w_min})")]
    DegenerateLayer { w_min: f64, w_max: f64 },
    #[error("dead activation: alpha must be positive, got {0}")]
    DeadActivation(f64),
    #[error("weight reconstruction error {error} exceeds step {eps} at element {index}")]
    Reconstruction { index: usize, error: f64, eps: f64 },
    #[error("32-bit overflow in requantization of channel {channel}")]
    Overflow { channel: usize },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("value {value} outside representable range [{lo}, {hi}] at element {index}")]
    OutOfRange { index: usize, value: i64, lo: i64, hi: i64 },
    #[error("requant parameter length {got} does not match channel count {channels}")]
    ChannelMismatch { got: usize, channels: usize },
    #[error("shift {0} outside [0, 31]")]
    BadShift(u32),
}

/// Storage width of an integer tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntWidth {
    U8,
    I8,
    I32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub eps: f64,
    pub levels: u64,
    pub signed: bool,
    pub zero_base: i32,
}

impl QuantParams {
    pub fn activation(eps: f64) -> Self {
        Self { eps, levels: ACT_LEVELS, signed: false, zero_base: 0 }
    }

    pub fn weight(eps: f64, zero_base: i32) -> Self {
        Self { eps, levels: WEIGHT_LEVELS, signed: true, zero_base }
    }

    pub fn accumulator(eps: f64) -> Self {
        Self { eps, levels: ACC_LEVELS, signed: true, zero_base: 0 }
    }

    /// Inclusive integer range of the codes.
    pub fn range(&self) -> (i64, i64) {
        let levels = self.levels as i64;
        if self.signed {
            (-(levels / 2), levels / 2 - 1)
        } else {
            (0, levels - 1)
        }
    }

    pub fn width(&self) -> IntWidth {
        match (self.signed, self.levels) {
            (false, l) if l <= 256 => IntWidth::U8,
            (true, l) if l <= 256 => IntWidth::I8,
            _ => IntWidth::I32,
        }
    }
}

/// Integer tensor with its quantization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    qp: QuantParams,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, qp: QuantParams) -> Result<Self, QuantError> {
        check_len(&shape, data.len())?;
        let (lo, hi) = qp.range();
        if let Some((index, &v)) =
            data.iter().enumerate().find(|(_, &v)| (v as i64) < lo || (v as i64) > hi)
        {
            return Err(QuantError::OutOfRange { index, value: v as i64, lo, hi });
        }
        Ok(Self { shape, data, qp })
    }

    pub fn zeros(shape: Vec<usize>, qp: QuantParams) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0; len], qp }
    }

    /// Builds an unsigned 8-bit activation tensor.
    pub fn from_u8(shape: Vec<usize>, data: &[u8], eps: f64) -> Result<Self, QuantError> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: data.iter().map(|&v| v as i32).collect(),
            qp: QuantParams::activation(eps),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn qp(&self) -> &QuantParams {
        &self.qp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Codes as bytes; only meaningful for `U8` tensors.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v.clamp(0, 255) as u8).collect()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<i32>, QuantParams) {
        (self.shape, self.data, self.qp)
    }
}

/// Real-valued tensor used by the float reference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl RTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, QuantError> {
        check_len(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.data.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<(), QuantError> {
    if shape.iter().product::<usize>() != len {
        return Err(QuantError::ShapeMismatch { shape: shape.to_vec(), len });
    }
    Ok(())
}

/// Floor quantization of a single value to a code relative to `zero_base`,
/// saturated to the representable range.
pub fn quantize_value(x: f64, qp: &QuantParams) -> i32 {
    let (lo, hi) = qp.range();
    let q = (x / qp.eps).floor() - qp.zero_base as f64;
    q.clamp(lo as f64, hi as f64) as i32
}

/// `q = clamp(floor(x / eps) - zero_base)` elementwise.
pub fn quantize(t: &RTensor, qp: &QuantParams) -> Result<QTensor, QuantError> {
    if !(qp.eps > 0.0) {
        return Err(QuantError::NonPositiveEps(qp.eps));
    }
    let mut data = Vec::with_capacity(t.len());
    for (index, &x) in t.data().iter().enumerate() {
        if !x.is_finite() {
            return Err(QuantError::NonFinite { index });
        }
        data.push(quantize_value(x as f64, qp));
    }
    Ok(QTensor { shape: t.shape.clone(), data, qp: *qp })
}

/// Real value of every code: `eps * (zero_base + q)`.
pub fn dequantize(q: &QTensor) -> RTensor {
    let eps = q.qp.eps;
    let zb = q.qp.zero_base as f64;
    RTensor {
        shape: q.shape.clone(),
        data: q.data.iter().map(|&v| (eps * (zb + v as f64)) as f32).collect(),
    }
}

/// Per-layer weight step `(w_max - w_min) / (2^7 - 1)`.
pub fn weight_eps(w_min: f64, w_max: f64) -> Result<f64, QuantError> {
    if !(w_max > w_min) || !w_min.is_finite() || !w_max.is_finite() {
        return Err(QuantError::DegenerateLayer { w_min, w_max });
    }
    Ok((w_max - w_min) / (WEIGHT_LEVELS as f64 - 1.0))
}

/// Activation step `alpha / (2^8 - 1)`.
pub fn act_eps(alpha: f64) -> Result<f64, QuantError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(QuantError::DeadActivation(alpha));
    }
    Ok(alpha / (ACT_LEVELS as f64 - 1.0))
}

/// Splits a weight tensor into a 128-level payload `w_star` in `[-64, 63]`
/// and the integer minimum `w_star_min = floor(w_min / eps)`.
///
/// The payload is centred on the 128-level grid starting at `w_star_min`,
/// so the full integer weight is `w_star_min + 64 + w_star` and the returned
/// tensor carries `zero_base = w_star_min + 64`.
pub fn decompose_weights(w: &RTensor, eps_w: f64) -> Result<(QTensor, i32), QuantError> {
    if !(eps_w > 0.0) {
        return Err(QuantError::NonPositiveEps(eps_w));
    }
    let (w_min, _) = w.min_max().ok_or(QuantError::ShapeMismatch { shape: w.shape.clone(), len: 0 })?;
    let w_star_min = (w_min as f64 / eps_w).floor() as i32;
    let zero_base = w_star_min + (WEIGHT_LEVELS as i32) / 2;
    let qp = QuantParams::weight(eps_w, zero_base);
    let q = quantize(w, &qp)?;
    let tol = eps_w * (1.0 + 1e-9) + f32::EPSILON as f64 * w_min.abs().max(1.0) as f64;
    for (index, (&x, &code)) in w.data().iter().zip(q.data()).enumerate() {
        let error = (eps_w * (zero_base + code) as f64 - x as f64).abs();
        if error > tol {
            return Err(QuantError::Reconstruction { index, error, eps: eps_w });
        }
    }
    Ok((q, w_star_min))
}

/// Like [`decompose_weights`] but on the nearest grid point: `w_star_min =
/// round(w_min / eps)` and each code is `round(w / eps) - zero_base`, so the
/// reconstruction error is at most `eps / 2` and has no systematic sign.
pub fn decompose_weights_nearest(w: &RTensor, eps_w: f64) -> Result<(QTensor, i32), QuantError> {
    if !(eps_w > 0.0) {
        return Err(QuantError::NonPositiveEps(eps_w));
    }
    let (w_min, _) = w.min_max().ok_or(QuantError::ShapeMismatch { shape: w.shape.clone(), len: 0 })?;
    let w_star_min = (w_min as f64 / eps_w).round() as i32;
    let zero_base = w_star_min + (WEIGHT_LEVELS as i32) / 2;
    let mut data = Vec::with_capacity(w.len());
    let tol = eps_w * (0.5 + 1e-9) + f32::EPSILON as f64 * w_min.abs().max(1.0) as f64;
    for (index, &x) in w.data().iter().enumerate() {
        let code = ((x as f64 / eps_w).round() as i64 - zero_base as i64).clamp(-64, 63) as i32;
        let error = (eps_w * (zero_base + code) as f64 - x as f64).abs();
        if error > tol {
            return Err(QuantError::Reconstruction { index, error, eps: eps_w });
        }
        data.push(code);
    }
    Ok((QTensor::new(w.shape.clone(), data, QuantParams::weight(eps_w, zero_base))?, w_star_min))
}

/// Integer affine requantization parameters for one layer: per-channel
/// multiplier and bias sharing one right shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requant {
    pub multipliers: Vec<i32>,
    pub biases: Vec<i32>,
    pub shift: u32,
}

impl Requant {
    pub fn identity(channels: usize) -> Self {
        Self { multipliers: vec![1; channels], biases: vec![0; channels], shift: 0 }
    }

    pub fn channels(&self) -> usize {
        self.multipliers.len()
    }

    /// Effective real scale of channel `c`.
    pub fn scale(&self, c: usize) -> f64 {
        self.multipliers[c] as f64 / (1u64 << self.shift) as f64
    }
}

/// `clamp((m * acc + bias) >> shift, 0, 255)`.
///
/// The product is formed at 64 bits; the shifted result must fit in 32 bits.
/// The arithmetic shift floors, and the clamp at zero doubles as ReLU.
#[inline]
pub fn requant_value(acc: i32, multiplier: i32, bias: i32, shift: u32) -> Option<u8> {
    let v = (multiplier as i64 * acc as i64 + bias as i64) >> shift;
    if v > i32::MAX as i64 || v < i32::MIN as i64 {
        return None;
    }
    Some(v.clamp(0, 255) as u8)
}

/// Applies `rq` to a `(C, ...)` accumulator tensor, producing 8-bit
/// unsigned activations with step `out_eps`.
pub fn int_affine_requant(acc: &QTensor, rq: &Requant, out_eps: f64) -> Result<QTensor, QuantError> {
    if rq.shift > 31 {
        return Err(QuantError::BadShift(rq.shift));
    }
    let channels = acc.shape.first().copied().unwrap_or(0);
    for got in [rq.multipliers.len(), rq.biases.len()] {
        if got != channels {
            return Err(QuantError::ChannelMismatch { got, channels });
        }
    }
    let per_channel = if channels == 0 { 0 } else { acc.len() / channels };
    let mut out = Vec::with_capacity(acc.len());
    for (c, chunk) in acc.data.chunks(per_channel.max(1)).enumerate().take(channels) {
        let (m, b) = (rq.multipliers[c], rq.biases[c]);
        for &a in chunk {
            let v = requant_value(a, m, b, rq.shift).ok_or(QuantError::Overflow { channel: c })?;
            out.push(v as i32);
        }
    }
    Ok(QTensor { shape: acc.shape.clone(), data: out, qp: QuantParams::activation(out_eps) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(data: Vec<f32>) -> RTensor {
        RTensor::new(vec![data.len()], data).unwrap()
    }

    #[test]
    fn quantize_zero_and_floor() {
        let q = quantize(&r(vec![0.0]), &QuantParams::activation(0.37)).unwrap();
        assert_eq!(q.data(), &[0]);
        let q = quantize(&r(vec![2.5]), &QuantParams::activation(1.0)).unwrap();
        assert_eq!(q.data(), &[2]);
    }

    #[test]
    fn quantize_saturates() {
        let q = quantize(&r(vec![-3.0, 400.0]), &QuantParams::activation(1.0)).unwrap();
        assert_eq!(q.data(), &[0, 255]);
    }

    #[test]
    fn quantize_rejects_non_finite_with_index() {
        let t = RTensor { shape: vec![3], data: vec![0.0, 1.0, f32::NAN] };
        assert_eq!(quantize(&t, &QuantParams::activation(1.0)), Err(QuantError::NonFinite { index: 2 }));
    }

    #[test]
    fn activation_grid_roundtrip_below_eps() {
        let alpha = 3.7;
        let eps = act_eps(alpha).unwrap();
        let n = 10_000;
        let xs: Vec<f32> = (0..n).map(|i| (alpha * i as f64 / (n - 1) as f64) as f32).collect();
        let q = quantize(&r(xs.clone()), &QuantParams::activation(eps)).unwrap();
        let back = dequantize(&q);
        let worst = xs.iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        assert!(worst < eps, "worst {worst} eps {eps}");
    }

    #[test]
    fn weight_and_act_eps() {
        assert!((weight_eps(-1.27, 1.27).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(weight_eps(0.0, 127.0).unwrap(), 1.0);
        assert!(matches!(weight_eps(1.0, 1.0), Err(QuantError::DegenerateLayer { .. })));
        assert_eq!(act_eps(255.0).unwrap(), 1.0);
        assert_eq!(act_eps(1.0).unwrap(), 1.0 / 255.0);
        assert!(matches!(act_eps(0.0), Err(QuantError::DeadActivation(_))));
    }

    #[test]
    fn weight_eps_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f32> = (0..2000).map(|_| rng.gen_range(-0.3..0.5)).collect();
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in &w {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        let (a, b) = r(w).min_max().unwrap();
        assert_eq!(weight_eps(a as f64, b as f64).unwrap(), (hi as f64 - lo as f64) / 127.0);
    }

    #[test]
    fn decompose_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = 0.8f32;
        let mut w: Vec<f32> = (0..500).map(|_| rng.gen_range(-a..a)).collect();
        w[0] = -a;
        w[1] = a;
        let t = r(w);
        let (lo, hi) = t.min_max().unwrap();
        let eps = weight_eps(lo as f64, hi as f64).unwrap();
        let (q, w_min) = decompose_weights(&t, eps).unwrap();
        assert_eq!(w_min, -64);
        assert_eq!(q.qp().zero_base, 0);
        assert!(q.data().iter().all(|&v| (-64..=63).contains(&v)));
        for (x, y) in t.data().iter().zip(dequantize(&q).data()) {
            assert!(((x - y).abs() as f64) <= eps * (1.0 + 1e-6));
        }
    }

    #[test]
    fn decompose_asymmetric_positive_range_fits_i8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w: Vec<f32> = (0..1000).map(|_| rng.gen_range(0.0..0.6)).collect();
        w[7] = 0.0;
        w[8] = 0.6;
        let t = r(w);
        let (lo, hi) = t.min_max().unwrap();
        let eps = weight_eps(lo as f64, hi as f64).unwrap();
        let (q, w_min) = decompose_weights(&t, eps).unwrap();
        let zb = q.qp().zero_base;
        assert_eq!(zb, w_min + 64);
        for &v in q.data() {
            assert!((-64..=63).contains(&v));
            assert!((-128..=127).contains(&(zb + v)));
        }
    }

    #[test]
    fn decompose_rejects_too_small_step() {
        let t = r(vec![-1.0, 1.0]);
        assert!(matches!(decompose_weights(&t, 0.001), Err(QuantError::Reconstruction { .. })));
    }

    #[test]
    fn nearest_decomposition_halves_error() {
        let t = r(vec![-0.3, 0.1, 0.2, 0.95]);
        let (lo, hi) = t.min_max().unwrap();
        let eps = weight_eps(lo as f64, hi as f64).unwrap();
        let (q, w_min) = decompose_weights_nearest(&t, eps).unwrap();
        assert_eq!(w_min, (-0.3f32 as f64 / eps).round() as i32);
        assert_eq!(q.data()[0], -64);
        assert_eq!(q.data()[3], 63);
        for (x, y) in t.data().iter().zip(dequantize(&q).data()) {
            assert!(((x - y).abs() as f64) <= eps * 0.5 + 1e-6);
        }
    }

    #[test]
    fn requant_identity_and_relu() {
        let acc = QTensor::new(vec![2, 3], vec![5, 300, -7, 0, 255, -1], QuantParams::accumulator(1.0)).unwrap();
        let out = int_affine_requant(&acc, &Requant::identity(2), 1.0).unwrap();
        assert_eq!(out.data(), &[5, 255, 0, 0, 255, 0]);
        assert_eq!(out.qp().width(), IntWidth::U8);
    }

    #[test]
    fn requant_overflow_and_errors() {
        let acc = QTensor::new(vec![1, 1], vec![i32::MAX], QuantParams::accumulator(1.0)).unwrap();
        let rq = Requant { multipliers: vec![i32::MAX], biases: vec![0], shift: 0 };
        assert_eq!(int_affine_requant(&acc, &rq, 1.0), Err(QuantError::Overflow { channel: 0 }));
        let rq = Requant { multipliers: vec![1, 1], biases: vec![0, 0], shift: 0 };
        assert!(matches!(int_affine_requant(&acc, &rq, 1.0), Err(QuantError::ChannelMismatch { .. })));
        let rq = Requant { multipliers: vec![1], biases: vec![0], shift: 32 };
        assert_eq!(int_affine_requant(&acc, &rq, 1.0), Err(QuantError::BadShift(32)));
    }

    #[test]
    fn requant_matches_wide_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let c = rng.gen_range(1..6);
            let n = rng.gen_range(1..40);
            let data: Vec<i32> = (0..c * n).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect();
            let rq = Requant {
                multipliers: (0..c).map(|_| rng.gen_range(-40_000..40_000)).collect(),
                biases: (0..c).map(|_| rng.gen_range(-1 << 24..1 << 24)).collect(),
                shift: rng.gen_range(16..32),
            };
            let acc = QTensor::new(vec![c, n], data.clone(), QuantParams::accumulator(1.0)).unwrap();
            let out = int_affine_requant(&acc, &rq, 1.0).unwrap();
            for (i, (&a, &o)) in data.iter().zip(out.data()).enumerate() {
                let ch = i / n;
                let wide = (rq.multipliers[ch] as i128 * a as i128 + rq.biases[ch] as i128)
                    .div_euclid(1i128 << rq.shift);
                assert_eq!(o as i128, wide.clamp(0, 255));
            }
        }
    }

    #[test]
    fn new_checks_range_and_shape() {
        assert!(matches!(
            QTensor::new(vec![2], vec![0, 256], QuantParams::activation(1.0)),
            Err(QuantError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            QTensor::new(vec![3], vec![0, 1], QuantParams::activation(1.0)),
            Err(QuantError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -10.0f32..300.0, b in -10.0f32..300.0, eps in 0.01f64..3.0) {
            let qp = QuantParams::activation(eps);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo as f64, &qp) <= quantize_value(hi as f64, &qp));
        }

        #[test]
        fn nearest_decomposition_in_range(w in proptest::collection::vec(-5.0f32..5.0, 2..200)) {
            let t = r(w);
            let (lo, hi) = t.min_max().unwrap();
            prop_assume!(hi > lo);
            let eps = weight_eps(lo as f64, hi as f64).unwrap();
            let (q, _) = decompose_weights_nearest(&t, eps).unwrap();
            prop_assert!(q.data().iter().all(|v| (-64..=63).contains(v)));
            for (x, y) in t.data().iter().zip(dequantize(&q).data()) {
                prop_assert!(((x - y).abs() as f64) <= eps * 0.5 + 1e-5);
            }
        }

        #[test]
        fn requant_output_in_byte_range(acc in any::<i32>(), m in -65536i32..65536, b in any::<i32>(), s in 16u32..32) {
            if let Some(v) = requant_value(acc, m, b, s) {
                let wide = ((m as i64 * acc as i64 + b as i64) >> s).clamp(0, 255);
                prop_assert_eq!(v as i64, wide);
            }
        }
    }
}
