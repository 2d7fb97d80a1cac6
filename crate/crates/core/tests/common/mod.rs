#![allow(dead_code)]

use frontnet::graph::{infer_shapes, LayerKind, LayerSpec, NetGraph, Shape3};
use frontnet::quantizer::{QuantizedGraph, QuantizedLayer};
use frontnet::tensor::{QTensor, QuantParams, Requant};
use rand::Rng;

/// Random chain of conv(+act) blocks with optional pooling, dropout and a
/// final FC layer, with random integer weights and requant parameters.
pub fn random_qgraph<R: Rng>(rng: &mut R) -> QuantizedGraph {
    let input = Shape3::new(rng.gen_range(1..=3), rng.gen_range(5..=14), rng.gen_range(5..=14));
    let mut layers = Vec::new();
    let mut ch = input.c;
    let (mut h, mut w) = (input.h, input.w);
    for b in 0..rng.gen_range(1..=3) {
        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..=k / 2);
        if h + 2 * p < k || w + 2 * p < k {
            break;
        }
        let out = rng.gen_range(1..=6);
        layers.push(LayerSpec::conv(format!("c{b}"), ch, out, k, s, p));
        layers.push(LayerSpec::act(format!("a{b}"), out));
        h = (h + 2 * p - k) / s + 1;
        w = (w + 2 * p - k) / s + 1;
        ch = out;
        if h >= 2 && w >= 2 && rng.gen_bool(0.3) {
            layers.push(LayerSpec::maxpool(format!("p{b}"), ch, 2, 2));
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
    }
    if rng.gen_bool(0.3) {
        layers.push(LayerSpec::dropout("d", ch));
    }
    let with_fc = rng.gen_bool(0.7);
    if with_fc {
        layers.push(LayerSpec::fc("fc", 0, rng.gen_range(1..=5)));
    }
    let g = infer_shapes(&NetGraph { variant: None, input_shape: input, layers }).expect("valid random chain");
    let qlayers = g
        .layers
        .iter()
        .map(|l| {
            let shape = l.weight_shape()?;
            let n: usize = shape.iter().product();
            let zb = rng.gen_range(-70..=70);
            let data = (0..n).map(|_| rng.gen_range(-64..=63)).collect();
            let requant = (l.kind == LayerKind::Conv2d).then(|| {
                let c = l.out_ch;
                Requant {
                    multipliers: (0..c).map(|_| rng.gen_range(-(1 << 12)..(1 << 16))).collect(),
                    biases: (0..c).map(|_| rng.gen_range(-(1 << 20)..(1 << 20))).collect(),
                    shift: rng.gen_range(8..=20),
                }
            });
            Some(QuantizedLayer {
                weights: QTensor::new(shape, data, QuantParams::weight(0.01, zb)).unwrap(),
                w_star_min: zb - 64,
                eps_in: 0.1,
                eps_w: 0.01,
                acc_eps: 0.001,
                requant,
                out_eps: 0.1,
            })
        })
        .collect();
    QuantizedGraph::new(g, 1.0 / 255.0, qlayers).expect("consistent random graph")
}

pub fn random_input<R: Rng>(rng: &mut R, s: Shape3) -> QTensor {
    let data = (0..s.elems()).map(|_| rng.gen_range(0..=255)).collect();
    QTensor::new(vec![s.c, s.h, s.w], data, QuantParams::activation(1.0 / 255.0)).unwrap()
}

/// Straightforward CHW integer forward pass in i64 with effective weights
/// `zero_base + w*`; returns every layer's output and whether every value
/// (including pre-clamp requant results) stayed within i32.
pub fn naive_forward(qg: &QuantizedGraph, input: &QTensor) -> (Vec<Vec<i64>>, bool) {
    let mut fits = true;
    let mut cur: Vec<i64> = input.data().iter().map(|&v| v as i64).collect();
    let mut outs = Vec::new();
    for (i, l) in qg.graph.layers.iter().enumerate() {
        let (ins, o) = (l.in_shape, l.out_shape);
        cur = match l.kind {
            LayerKind::Conv2d => {
                let q = qg.layers[i].as_ref().unwrap();
                let zb = q.weights.qp().zero_base as i64;
                let w = q.weights.data();
                let (kh, kw) = l.kernel;
                let mut out = vec![0i64; o.elems()];
                for co in 0..o.c {
                    for oy in 0..o.h {
                        for ox in 0..o.w {
                            let mut acc = 0i64;
                            for ci in 0..ins.c {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * l.stride.0 + ky) as i64 - l.padding.0 as i64;
                                        let ix = (ox * l.stride.1 + kx) as i64 - l.padding.1 as i64;
                                        if iy < 0 || ix < 0 || iy >= ins.h as i64 || ix >= ins.w as i64 {
                                            continue;
                                        }
                                        let wv = zb + w[((co * ins.c + ci) * kh + ky) * kw + kx] as i64;
                                        acc += wv * cur[(ci * ins.h + iy as usize) * ins.w + ix as usize];
                                    }
                                }
                            }
                            out[(co * o.h + oy) * o.w + ox] = acc;
                        }
                    }
                }
                out
            }
            LayerKind::RequantAct => {
                let rq = qg.layers[i - 1].as_ref().unwrap().requant.as_ref().unwrap();
                let plane = o.h * o.w;
                cur.iter()
                    .enumerate()
                    .map(|(j, &a)| {
                        let c = j / plane;
                        let v = (rq.multipliers[c] as i64 * a + rq.biases[c] as i64) >> rq.shift;
                        fits &= i32::try_from(v).is_ok();
                        v.clamp(0, 255)
                    })
                    .collect()
            }
            LayerKind::MaxPool => {
                let mut out = Vec::with_capacity(o.elems());
                for c in 0..o.c {
                    for oy in 0..o.h {
                        for ox in 0..o.w {
                            let mut m = i64::MIN;
                            for ky in 0..l.kernel.0 {
                                for kx in 0..l.kernel.1 {
                                    let (iy, ix) = (oy * l.stride.0 + ky, ox * l.stride.1 + kx);
                                    if iy < ins.h && ix < ins.w {
                                        m = m.max(cur[(c * ins.h + iy) * ins.w + ix]);
                                    }
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                out
            }
            LayerKind::DropoutNoop => cur,
            LayerKind::FullyConnected => {
                let q = qg.layers[i].as_ref().unwrap();
                let zb = q.weights.qp().zero_base as i64;
                q.weights
                    .data()
                    .chunks(l.in_ch)
                    .map(|row| row.iter().zip(&cur).map(|(&w, &x)| (zb + w as i64) * x).sum())
                    .collect()
            }
        };
        fits &= cur.iter().all(|&v| i32::try_from(v).is_ok());
        outs.push(cur.clone());
    }
    (outs, fits)
}

/// Compares the engine's per-layer snapshots against the naive oracle.
/// Returns `Ok(false)` when the oracle leaves i32 (the engine must then
/// report overflow instead of a result).
pub fn engine_matches_oracle(qg: &QuantizedGraph, input: &QTensor, threads: usize) -> Result<bool, String> {
    let (want, fits) = naive_forward(qg, input);
    let engine = frontnet::IntEngine::new(qg).with_threads(threads).map_err(|e| e.to_string())?;
    match engine.infer_with_snapshots(input) {
        Ok(r) => {
            if !fits {
                return Err("engine produced a result where the oracle overflows".into());
            }
            for (k, (s, w)) in r.snapshots.iter().zip(&want).enumerate() {
                let got: Vec<i64> = s.data().iter().map(|&v| v as i64).collect();
                if &got != w {
                    return Err(format!("layer {k} ({}) differs", qg.graph.layers[k].name));
                }
            }
            let last: Vec<i64> = r.raw.iter().map(|&v| v as i64).collect();
            if Some(&last) != want.last() {
                return Err("raw output differs".into());
            }
            Ok(true)
        }
        Err(_) if !fits => Ok(false),
        Err(e) => Err(format!("unexpected error: {e}")),
    }
}
