//! Float reference executor (CHW layout, f64 accumulation).

use rayon::prelude::*;

use crate::graph::{LayerKind, LayerSpec, Shape3};
use crate::quantizer::FloatModel;
use crate::tensor::RTensor;

use super::EngineError;

/// Runs the float model; returns the final output values and, when
/// `record` is set, every layer's output tensor.
pub fn float_forward(model: &FloatModel, input: &RTensor, record: bool) -> (Vec<f32>, Vec<RTensor>) {
    let g = &model.graph;
    let mut cur: Vec<f32> = input.data().to_vec();
    let mut outs = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        cur = forward_layer(model, i, cur);
        if record {
            let s = l.out_shape;
            outs.push(RTensor::new(vec![s.c, s.h, s.w], cur.clone()).expect("finite activations"));
        }
    }
    (cur, outs)
}

/// Applies layer `i` to a CHW buffer.
pub fn forward_layer(model: &FloatModel, i: usize, cur: Vec<f32>) -> Vec<f32> {
    let l = &model.graph.layers[i];
    match l.kind {
        LayerKind::Conv2d => conv(l, &cur, &model.params[i].as_ref().expect("conv weights").weight),
        LayerKind::RequantAct => {
            let bn = model.params[i - 1].as_ref().and_then(|p| p.bn.as_ref()).expect("conv batch-norm");
            let plane = l.out_shape.h * l.out_shape.w;
            let mut v = cur;
            for (c, chunk) in v.chunks_mut(plane).enumerate() {
                let (s, b) = bn.affine(c);
                chunk.iter_mut().for_each(|x| *x = ((s * *x as f64 + b) as f32).max(0.0));
            }
            v
        }
        LayerKind::MaxPool => maxpool(l, &cur),
        LayerKind::DropoutNoop => cur,
        LayerKind::FullyConnected => {
            let w = model.params[i].as_ref().expect("fc weights").weight.data();
            w.chunks(l.in_ch)
                .map(|row| row.iter().zip(&cur).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32)
                .collect()
        }
    }
}

fn conv(l: &LayerSpec, x: &[f32], w: &RTensor) -> Vec<f32> {
    let Shape3 { c: ci_n, h: ih, w: iw } = l.in_shape;
    let Shape3 { c: co_n, h: oh, w: ow } = l.out_shape;
    let ((kh, kw), (sh, sw), (ph, pw)) = (l.kernel, l.stride, l.padding);
    let w = w.data();
    let mut out = vec![0.0f32; co_n * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..ci_n {
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let wv = w[((co * ci_n + ci) * kh + ky) * kw + kx] as f64;
                            acc += wv * x[(ci * ih + iy as usize) * iw + ix as usize] as f64;
                        }
                    }
                }
                plane[oy * ow + ox] = acc as f32;
            }
        }
    });
    out
}

fn maxpool(l: &LayerSpec, x: &[f32]) -> Vec<f32> {
    let Shape3 { c, h: ih, w: iw } = l.in_shape;
    let Shape3 { h: oh, w: ow, .. } = l.out_shape;
    let ((kh, kw), (sh, sw)) = (l.kernel, l.stride);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for iy in oy * sh..(oy * sh + kh).min(ih) {
                    for ix in ox * sw..(ox * sw + kw).min(iw) {
                        m = m.max(x[(ch * ih + iy) * iw + ix]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Float inference with an input shape check.
pub fn infer_float(model: &FloatModel, image: &RTensor) -> Result<Vec<f64>, EngineError> {
    let s = model.graph.input_shape;
    let expected = vec![s.c, s.h, s.w];
    if image.shape() != expected.as_slice() {
        return Err(EngineError::InputShape { got: image.shape().to_vec(), expected });
    }
    let (out, _) = float_forward(model, image, false);
    Ok(out.into_iter().map(f64::from).collect())
}
