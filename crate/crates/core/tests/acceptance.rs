//! End-to-end acceptance checks, one line per criterion. Runs criteria one
//! after another so each runtime limit is measured without contention.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use frontnet::augment::{augment, hflip, pitch_crop, AugmentConfig, LabeledImage};
use frontnet::control::metrics::r2;
use frontnet::control::{run_experiment, ControlConfig, NoiseModel, ScenarioScript, Source};
use frontnet::cost_model::{calibrate_anchors, default_grid, reference_anchors, sweep, Workload};
use frontnet::engine::{error_bound, image_rtensor, image_tensor, infer_float};
use frontnet::planner::audit::audit;
use frontnet::tensor::{decompose_weights, decompose_weights_nearest, quantize, QuantParams};
use frontnet::{
    analyze, calibrate, convert, plan, CalibrationSet, CostParams, FloatModel, GrayImage, IntEngine, MemoryHierarchy, OperatingPoint,
    PlanOptions, Pose, RTensor, Variant, WeightPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Independent layer enumeration: conv5x5/2 (pad 2), maxpool 2/2, three
// blocks of conv3x3/2 + conv3x3/1 (pad 1), FC to 4 outputs. No biases.
// Memory counts the 8-bit input, 8-bit weights, every 8-bit activation
// buffer after the fused activations and pooling, and the 4 x 32-bit output.
fn table_oracle(width: usize, c: usize) -> (usize, usize, usize) {
    let out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let (mut h, mut w) = (width * 3 / 5, width);
    let input = h * w;
    let (mut macs, mut params, mut buffers) = (0, 0, 0);
    // (cin, cout, k, s, p) for every convolution, pooling after the first
    let c2 = [(c, c), (c, 2 * c), (2 * c, 4 * c)];
    let mut convs = vec![(1, c, 5, 2, 2)];
    for (cin, cout) in c2 {
        convs.push((cin, cout, 3, 2, 1));
        convs.push((cout, cout, 3, 1, 1));
    }
    for (i, (cin, cout, k, s, p)) in convs.into_iter().enumerate() {
        h = out(h, k, s, p);
        w = out(w, k, s, p);
        macs += h * w * k * k * cin * cout;
        params += k * k * cin * cout;
        buffers += h * w * cout;
        if i == 0 {
            h /= 2;
            w /= 2;
            buffers += h * w * c;
        }
    }
    let ch = 4 * c;
    let fc = ch * h * w * 4;
    (macs + fc, params + fc, input + params + fc + buffers + 16)
}

fn criterion_1() -> Check {
    let published = [
        (Variant::W160C32, "14.1", "499", 3.03e5),
        (Variant::W160C16, "4.30", "184", 7.80e4),
        (Variant::W80C32, "4.03", "348", 2.99e5),
    ];
    let mut notes = Vec::new();
    for (v, mmac, kb, params_sci) in published {
        let s = analyze(&v.build()).map_err(|e| e.to_string())?;
        let (macs, params, mem) = table_oracle(v.width(), v.base_channels());
        ensure((s.macs, s.params, s.memory_bytes) == (macs, params, mem), || {
            format!("{v}: analyze {:?} vs oracle {:?}", (s.macs, s.params, s.memory_bytes), (macs, params, mem))
        })?;
        ensure(frontnet::graph::sig3(s.macs as f64 / 1e6) == mmac, || format!("{v}: MMAC rounds differently from {mmac}"))?;
        ensure(format!("{:.0}", s.memory_bytes as f64 / 1e3) == kb, || format!("{v}: kB rounds differently from {kb}"))?;
        let sci = format!("{:.2e}", s.params as f64);
        ensure(sci.parse::<f64>().unwrap() == params_sci, || format!("{v}: params {sci} vs {params_sci:e}"))?;
        notes.push(format!("{v} {}/{}/{}", s.macs, s.params, s.memory_bytes));
    }
    // the stated 160x32 MAC literal is not reachable by this architecture
    let listed = 14_127_360usize;
    notes.push(format!("160x32 listed MAC literal {listed} differs from the enumeration by {}", table_oracle(160, 32).0 - listed));
    Ok(notes.join("; "))
}

fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let (fx, fy, ph) = (rng.gen_range(0.02..0.15), rng.gen_range(0.02..0.15), rng.gen_range(0.0..std::f64::consts::TAU));
    let pixels = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (128.0 + 90.0 * (fx * x + ph).sin() * (fy * y).cos() + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(w, h, pixels).unwrap()
}

fn criterion_2() -> Check {
    // roundtrip on dense grids, several steps and offsets
    for (k, eps) in [1.0 / 255.0, 0.01, 0.37, 2.5].into_iter().enumerate() {
        let qp = QuantParams::activation(eps);
        let top = eps * 255.0;
        let grid: Vec<f32> = (0..10_000).map(|i| (top * i as f64 / 10_000.0) as f32).collect();
        let q = quantize(&RTensor::new(vec![grid.len()], grid.clone()).unwrap(), &qp).map_err(|e| e.to_string())?;
        for (x, c) in grid.iter().zip(q.data()) {
            let err = (*x as f64 - eps * *c as f64).abs();
            ensure(err < eps, || format!("grid {k}: x = {x} error {err} >= eps {eps}"))?;
        }
    }
    // weight decomposition on dense grids spanning each layer range
    for (lo, hi) in [(-0.5f64, 0.5f64), (-0.03, 0.11), (-2.0, -0.25), (0.1, 3.0)] {
        let w: Vec<f32> = (0..10_000).map(|i| (lo + (hi - lo) * i as f64 / 9_999.0) as f32).collect();
        let t = RTensor::new(vec![w.len()], w).unwrap();
        let (wmin, wmax) = t.min_max().unwrap();
        let eps_w = frontnet::tensor::weight_eps(wmin as f64, wmax as f64).map_err(|e| e.to_string())?;
        for (name, (q, _)) in [
            ("floor", decompose_weights(&t, eps_w).map_err(|e| e.to_string())?),
            ("nearest", decompose_weights_nearest(&t, eps_w).map_err(|e| e.to_string())?),
        ] {
            ensure(q.data().iter().all(|c| (-64..=63).contains(c)), || format!("{name}: payload outside [-64, 63]"))?;
            let zb = q.qp().zero_base as f64;
            let slack = f32::EPSILON as f64 * wmin.abs().max(wmax.abs()).max(1.0) as f64;
            for (x, c) in t.data().iter().zip(q.data()) {
                let err = (eps_w * (zb + *c as f64) - *x as f64).abs();
                ensure(err <= eps_w + slack, || format!("{name} [{lo}, {hi}]: error {err} > eps_w {eps_w}"))?;
            }
        }
    }
    // bit-exact against the naive oracle
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut exact = 0;
    let mut case = 0;
    while exact < 100 {
        ensure(case < 400, || format!("only {exact} in-range graphs in {case} cases"))?;
        let qg = common::random_qgraph(&mut rng);
        let input = common::random_input(&mut rng, qg.graph.input_shape);
        if common::engine_matches_oracle(&qg, &input, 1 + case % 4).map_err(|e| format!("case {case}: {e}"))? {
            exact += 1;
        }
        case += 1;
    }
    // integer vs float within the accumulated bound
    let mut worst = Vec::new();
    for (k, v) in Variant::ALL.into_iter().enumerate() {
        let m = FloatModel::random(v.build(), 40 + k as u64).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(90 + k as u64);
        let imgs: Vec<GrayImage> = (0..12).map(|_| smooth_image(&mut rng, v.width(), v.height())).collect();
        let calib = CalibrationSet::new(imgs.iter().map(image_rtensor).collect());
        let qg = convert(&m, &calibrate(&m, &calib).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let bound = error_bound(&m, &qg);
        let engine = IntEngine::new(&qg);
        let mut w = 0.0f64;
        for img in &imgs {
            let got = engine.infer(&image_tensor(img)).map_err(|e| e.to_string())?.values();
            let want = infer_float(&m, &image_rtensor(img)).map_err(|e| e.to_string())?;
            for j in 0..4 {
                let d = (got[j] - want[j]).abs();
                ensure(d <= bound[j], || format!("{v}: output {j} differs by {d}, bound {}", bound[j]))?;
                w = w.max(d);
            }
        }
        worst.push(format!("{v} {w:.3}"));
    }
    Ok(format!("{exact} graphs bit-exact in {case} cases; worst |int - float| {}", worst.join(", ")))
}

fn criterion_3() -> Check {
    let mem = MemoryHierarchy::default();
    let mut notes = Vec::new();
    for v in Variant::ALL {
        let g = v.build();
        let p = plan(&g, &mem, PlanOptions::default()).map_err(|e| format!("{v}: {e}"))?;
        let rep = audit(&g, &p).map_err(|f| format!("{v}: audit {f:?}"))?;
        ensure(rep.max_tile_l1 <= 65_536 && rep.max_node_l2 <= 524_288, || format!("{v}: {rep:?}"))?;
        notes.push(format!("{v} streamed L1 {} B, L2 {} B", rep.max_tile_l1, rep.max_node_l2));
    }
    let g = Variant::W160C16.build();
    let p = plan(&g, &mem, PlanOptions { policy: WeightPolicy::ResidentL2, fuse_pool: true }).map_err(|e| format!("160x16 resident: {e}"))?;
    let rep = audit(&g, &p).map_err(|f| format!("160x16 resident audit {f:?}"))?;
    ensure(rep.max_node_l2 <= 524_288, || format!("160x16 resident: {rep:?}"))?;
    notes.push(format!("160x16 resident L2 {} B", rep.max_node_l2));
    Ok(notes.join("; "))
}

fn criterion_4() -> Check {
    let mem = MemoryHierarchy::default();
    let cal = calibrate_anchors(&reference_anchors(), &mem, &CostParams::default()).map_err(|e| e.to_string())?;
    let params = cal.params;
    let corner = OperatingPoint::max_frequency();
    let mut peaks = Vec::new();
    let mut notes = vec![format!("fit rms {:.3}", cal.rms)];
    for (v, policy, published) in [
        (Variant::W80C32, WeightPolicy::StreamedL3, 0.43),
        (Variant::W160C16, WeightPolicy::ResidentL2, 0.58),
        (Variant::W160C32, WeightPolicy::StreamedL3, 1.28),
    ] {
        let g = v.build();
        let p = plan(&g, &mem, PlanOptions { policy, fuse_pool: true }).map_err(|e| e.to_string())?;
        let s = sweep(&g, &p, &default_grid(), &params).map_err(|e| e.to_string())?;
        let best = s.energy_optimum();
        ensure(best.mj_frame <= 2.0 * published && best.mj_frame >= published / 2.0, || {
            format!("{v}: best {:.3} mJ not within 2x of {published}", best.mj_frame)
        })?;
        ensure(!(best.op.f_fc == corner.f_fc && best.op.f_cl == corner.f_cl), || format!("{v}: energy optimum at the max corner"))?;
        peaks.push(s.throughput_optimum().fps);
        notes.push(format!("{v} {:.3} mJ at FC{}/CL{}", best.mj_frame, best.op.f_fc, best.op.f_cl));
    }
    ensure(peaks[0] > peaks[1] && peaks[1] > peaks[2], || format!("peak fps ordering {peaks:?}"))?;
    let g = Variant::W80C32.build();
    let w = Workload::new(&g, &plan(&g, &mem, PlanOptions::default()).map_err(|e| e.to_string())?);
    let est = |f_fc, f_cl| w.estimate(&OperatingPoint::new(f_fc, f_cl).unwrap(), &params).map_err(|e| e.to_string());
    let (slow_fc, fast_fc) = (est(25.0, 100.0)?, est(250.0, 25.0)?);
    ensure(slow_fc.idle_nodes() >= 3, || format!("FC25/CL100 idle in {} layers", slow_fc.idle_nodes()))?;
    ensure(fast_fc.idle_nodes() == 0, || format!("FC250/CL25 idle in {} layers", fast_fc.idle_nodes()))?;
    notes.push(format!("idle layers FC25/CL100 {}, FC250/CL25 0", slow_fc.idle_nodes()));
    Ok(notes.join("; "))
}

fn criterion_5() -> Check {
    let script = ScenarioScript::default();
    let cfg = ControlConfig::default();
    let bounds_hold = |log: &frontnet::control::RunLog| {
        log.clamps_ok
            && log.max_cmd_axis <= cfg.v_max + 1e-12
            && log.max_cmd_omega <= cfg.omega_max + 1e-12
            && log.max_vel_axis <= cfg.v_max + 1e-12
            && log.max_omega <= cfg.omega_max + 1e-12
            && log.max_accel <= 2.04
    };
    let (mlog, mocap) = run_experiment(&script, &NoiseModel::none(0), Source::Mocap.rate(), &cfg).map_err(|e| e.to_string())?;
    ensure((mocap.phase_end_distance[0] - 1.3).abs() < 0.1, || format!("phase 0 ends {:.3} m away", mocap.phase_end_distance[0]))?;
    ensure(mocap.phases_completed == 8, || format!("mocap completed {} phases", mocap.phases_completed))?;
    ensure(mocap.median_e_theta < 5.0, || format!("mocap median e_theta {:.2} deg", mocap.median_e_theta))?;
    ensure(bounds_hold(&mlog), || "mocap run broke a clamp".into())?;
    let mut notes = vec![format!("mocap e_xy {:.3} m e_theta {:.2} deg", mocap.median_e_xy, mocap.median_e_theta)];
    for v in Variant::ALL {
        let src = Source::Net(v);
        let runs = (1..=20u64)
            .into_par_iter()
            .map(|seed| run_experiment(&script, &src.noise(seed), src.rate(), &cfg).map(|(log, m)| (seed, bounds_hold(&log), m)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        for (seed, ok, m) in &runs {
            ensure(*ok, || format!("{v} seed {seed}: clamp violated"))?;
            ensure(m.median_e_theta < 40.5, || format!("{v} seed {seed}: median e_theta {:.1} deg", m.median_e_theta))?;
            ensure(mocap.median_e_xy < m.median_e_xy, || format!("{v} seed {seed}: e_xy {:.3} not above zero-noise", m.median_e_xy))?;
        }
        let worst = runs.iter().map(|r| r.2.median_e_theta).fold(0.0, f64::max);
        notes.push(format!("{v}@{}Hz worst median e_theta {worst:.1} deg", src.rate()));
    }
    Ok(notes.join("; "))
}

fn random_labeled(rng: &mut ChaCha8Rng) -> LabeledImage {
    let (w, h) = (rng.gen_range(1..48), rng.gen_range(1..48));
    LabeledImage {
        image: GrayImage::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap(),
        label: Pose::new(rng.gen_range(0.5..3.0), rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5), rng.gen_range(-3.1..3.1)),
    }
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let li = random_labeled(&mut rng);
        let f = hflip(&li);
        ensure(hflip(&f) == li, || format!("image {i}: flip twice is not the identity"))?;
        ensure(f.label.y == -li.label.y && f.label.theta == -li.label.theta && f.label.x == li.label.x, || format!("image {i}: label"))?;
        ensure(f.image.pixels[0] == li.image.pixels[li.image.width - 1], || format!("image {i}: pixels not mirrored"))?;
    }
    let frame = GrayImage::new(160, 160, (0..160 * 160).map(|i| (i / 160) as u8).collect()).unwrap();
    for (offset, deg) in [(0, 14.0), (32, 0.0), (64, -14.0)] {
        let (crop, pitch) = pitch_crop(&frame, offset).map_err(|e| e.to_string())?;
        ensure((pitch.to_degrees() - deg).abs() < 1e-9, || format!("offset {offset}: {} deg", pitch.to_degrees()))?;
        ensure(crop.height == 96 && crop.get(0, 0) as usize == offset, || format!("offset {offset}: wrong rows"))?;
    }
    let digest = |seed: u64| -> Result<String, String> {
        let mut src_rng = ChaCha8Rng::seed_from_u64(99);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugmentConfig { seed, ..Default::default() };
        let mut h = Sha256::new();
        for _ in 0..50 {
            let src = LabeledImage {
                image: GrayImage::new(162, 162, (0..162 * 162).map(|_| src_rng.gen()).collect()).unwrap(),
                label: Pose::new(1.5, 0.3, 0.0, 0.2),
            };
            let a = augment(&src, &cfg, &mut rng).map_err(|e| e.to_string())?;
            h.update(&a.image.pixels);
            for c in a.label.components() {
                h.update(c.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    };
    let (a, b, other) = (digest(17)?, digest(17)?, digest(18)?);
    ensure(a == b, || "same seed gave different outputs".into())?;
    ensure(a != other, || "different seeds gave identical outputs".into())?;
    Ok(format!("1000 flips involutive; seed 17 digest {}", &a[..16]))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let truth: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mean = truth.iter().sum::<f64>() / truth.len() as f64;
        let perfect = r2(&truth, &truth);
        let mean_pred = r2(&vec![mean; truth.len()], &truth);
        let worse: Vec<f64> = truth.iter().map(|t| 2.0 * mean - t).collect();
        let bad = r2(&worse, &truth);
        ensure(perfect == 1.0, || format!("trial {trial}: perfect predictor R2 {perfect}"))?;
        ensure(mean_pred.abs() < 1e-12, || format!("trial {trial}: mean predictor R2 {mean_pred}"))?;
        ensure(bad < 0.0, || format!("trial {trial}: reflected predictor R2 {bad}"))?;
    }
    Ok("R2 = 1, 0 and < 0 on 100 synthetic sets".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check, Duration); 7] = [
        ("graph analysis table", criterion_1, Duration::from_secs(1)),
        ("quantization properties", criterion_2, Duration::from_secs(60)),
        ("planner feasibility", criterion_3, Duration::from_secs(5)),
        ("cost-model structure", criterion_4, Duration::from_secs(10)),
        ("control-loop properties", criterion_5, Duration::from_secs(120)),
        ("augmentation", criterion_6, Duration::from_secs(30)),
        ("metrics", criterion_7, Duration::from_secs(1)),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(_) if took > limit => Err(format!("took {took:.2?}, limit {limit:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
