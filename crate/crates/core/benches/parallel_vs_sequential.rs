use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cloudq::bench::{generate_testbed, run_benchmark, BenchOptions, BenchPolicy, Scale, TestBedSpec};
use cloudq::mdp::{self, SolveMethod, SolveOptions};
use cloudq::policy::Policy;
use cloudq::sim::{simulate, SimConfig};
use cloudq::{DeadlineRegime, ExecMode, Instance, NodeParams};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn small_bed() -> Vec<Instance> {
    let mut spec = TestBedSpec::new(Scale::Small, vec![DeadlineRegime::Dbs, DeadlineRegime::Des]);
    spec.mu1 = vec![1.0, 3.0];
    spec.theta = vec![0.6];
    spec.c = vec![0.5];
    spec.truncation = 40;
    generate_testbed(&spec).expect("valid test bed")
}

fn gap_study(c: &mut Criterion) {
    let bed = small_bed();
    let mut g = c.benchmark_group("gap_study");
    g.sample_size(10).measurement_time(Duration::from_secs(20));
    for (name, exec) in MODES {
        let opts = BenchOptions { exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_benchmark(black_box(&bed), &BenchPolicy::ALL, &opts))
        });
    }
    g.finish();
}

fn value_iteration(c: &mut Criterion) {
    let nodes = vec![NodeParams::new(3, 2.0).unwrap(), NodeParams::new(5, 1.0).unwrap()];
    let mut inst = Instance::new(DeadlineRegime::Dbs, 12.0, 0.5, 0.4, nodes).unwrap();
    inst.truncation = 60;
    let chain = mdp::build_chain(&inst).unwrap();
    let mut g = c.benchmark_group("value_iteration");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = SolveOptions { method: SolveMethod::ValueIteration, exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mdp::solve_optimal(black_box(&chain), &opts).unwrap().gain)
        });
    }
    g.finish();
}

fn replications(c: &mut Criterion) {
    let inst = Instance::base(1, DeadlineRegime::Des).unwrap();
    let policy = Policy::by_name(&inst, "rb").unwrap();
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig { jobs: 20_000, replications: 8, exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate(black_box(&inst), &policy, &cfg).unwrap().cost_rate.mean)
        });
    }
    g.finish();
}

criterion_group!(benches, gap_study, value_iteration, replications);
criterion_main!(benches);
