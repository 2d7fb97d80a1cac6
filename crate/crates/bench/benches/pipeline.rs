use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use frontnet::control::{run_experiment, ControlConfig, ScenarioScript, Source};
use frontnet::cost_model::default_grid;
use frontnet::{plan, sweep, CostParams, IntEngine, MemoryHierarchy, PlanOptions, Variant};
use frontnet_bench::{input, quantized};

fn engine(c: &mut Criterion) {
    let mut group = c.benchmark_group("int_engine");
    group.sample_size(10);
    for v in Variant::ALL {
        let qg = quantized(v, 1);
        let x = input(v);
        for threads in [1, 8] {
            let e = IntEngine::new(&qg).with_threads(threads).unwrap();
            group.bench_with_input(BenchmarkId::new(v.to_string(), threads), &x, |b, x| b.iter(|| e.infer(black_box(x)).unwrap()));
        }
    }
    group.finish();
}

fn planner_and_sweep(c: &mut Criterion) {
    let mem = MemoryHierarchy::default();
    let g = Variant::W160C32.build();
    c.bench_function("plan_160x32", |b| b.iter(|| plan(black_box(&g), &mem, PlanOptions::default()).unwrap()));
    let p = plan(&g, &mem, PlanOptions::default()).unwrap();
    let grid = default_grid();
    let params = CostParams::default();
    c.bench_function("sweep_160x32", |b| b.iter(|| sweep(&g, &p, black_box(&grid), &params).unwrap()));
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    let script = ScenarioScript::default();
    let cfg = ControlConfig::default();
    let src = Source::Net(Variant::W160C16);
    group.bench_function("160x16_one_run", |b| b.iter(|| run_experiment(&script, &src.noise(black_box(3)), src.rate(), &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, engine, planner_and_sweep, simulation);
criterion_main!(benches);
