use frontnet::cost_model::{calibrate_anchors, default_grid, reference_anchors, sweep, Calibration, Workload};
use frontnet::planner::{plan, MemoryHierarchy, PlanOptions, WeightPolicy};
use frontnet::{CostParams, DeploymentPlan, NetGraph, OperatingPoint, Variant};

fn planned(v: Variant, policy: WeightPolicy) -> (NetGraph, DeploymentPlan) {
    let g = v.build();
    let p = plan(&g, &MemoryHierarchy::default(), PlanOptions { policy, fuse_pool: true }).unwrap();
    (g, p)
}

fn calibrated() -> Calibration {
    calibrate_anchors(&reference_anchors(), &MemoryHierarchy::default(), &CostParams::default()).unwrap()
}

#[test]
fn anchors_fit_with_small_residuals() {
    let c = calibrated();
    assert_eq!(c.residuals.len(), 3);
    assert!(c.rms < 0.05, "{c:#?}");
    assert!(c.residuals.iter().all(|r| r.fps.abs() < 0.1 && r.mw.abs() < 0.1), "{c:#?}");
    // effective efficiency stays below the kernel peak
    assert!(c.params.eta_peak < 15.6);
    c.params.validate().unwrap();
}

#[test]
fn sweep_structure_after_calibration() {
    let params = calibrated().params;
    let corner = OperatingPoint::max_frequency();
    let mut peaks = Vec::new();
    for (v, policy, published) in [
        (Variant::W80C32, WeightPolicy::StreamedL3, 0.43),
        (Variant::W160C16, WeightPolicy::ResidentL2, 0.58),
        (Variant::W160C32, WeightPolicy::StreamedL3, 1.28),
    ] {
        let (g, p) = planned(v, policy);
        let s = sweep(&g, &p, &default_grid(), &params).unwrap();
        let best = s.energy_optimum();
        eprintln!("{v}: {:.3} mJ at FC{}/CL{}, peak {:.1} fps", best.mj_frame, best.op.f_fc, best.op.f_cl, s.throughput_optimum().fps);
        assert!(best.mj_frame <= 2.0 * published && best.mj_frame >= published / 2.0, "{v}: {}", best.mj_frame);
        assert!(!(best.op.f_fc == corner.f_fc && best.op.f_cl == corner.f_cl), "{v}: optimum at the corner");
        peaks.push(s.throughput_optimum().fps);
    }
    assert!(peaks[0] > peaks[1] && peaks[1] > peaks[2], "{peaks:?}");
}

#[test]
fn streaming_bottleneck_moves_with_clock_ratio() {
    let params = calibrated().params;
    let (g, p) = planned(Variant::W80C32, WeightPolicy::StreamedL3);
    let w = Workload::new(&g, &p);
    let slow_fc = w.estimate(&OperatingPoint::new(25.0, 100.0).unwrap(), &params).unwrap();
    let fast_fc = w.estimate(&OperatingPoint::new(250.0, 25.0).unwrap(), &params).unwrap();
    assert!(slow_fc.idle_nodes() >= 3, "{:#?}", slow_fc.nodes);
    assert_eq!(fast_fc.idle_nodes(), 0);
    // hiding the transfers costs FC power
    assert!(fast_fc.mw_fc > slow_fc.mw_fc);
}
