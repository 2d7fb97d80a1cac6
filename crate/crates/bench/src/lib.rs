//! Shared fixtures for the pipeline benchmarks.

use frontnet::engine::{image_rtensor, image_tensor};
use frontnet::{calibrate, convert, CalibrationSet, FloatModel, GrayImage, QTensor, QuantizedGraph, Variant};

/// Deterministic textured frame at a network's input size.
pub fn frame(v: Variant, phase: usize) -> GrayImage {
    let (w, h) = (v.width(), v.height());
    let pixels = (0..w * h).map(|i| ((i % w) * 7 + (i / w) * 13 + phase * 31) as u8).collect();
    GrayImage::new(w, h, pixels).expect("sized buffer")
}

/// Random-weight model quantized on a handful of synthetic frames.
pub fn quantized(v: Variant, seed: u64) -> QuantizedGraph {
    let model = FloatModel::random(v.build(), seed).expect("random model");
    let calib = CalibrationSet::new((0..4).map(|k| image_rtensor(&frame(v, k))).collect());
    let alphas = calibrate(&model, &calib).expect("calibration");
    convert(&model, &alphas).expect("conversion")
}

pub fn input(v: Variant) -> QTensor {
    image_tensor(&frame(v, 0))
}
