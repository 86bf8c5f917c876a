use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wassimpute::conformal::{calibrate, CalibrationConfig};
use wassimpute::par::Exec;
use wassimpute::propensity::IpwWeights;
use wassimpute::sim::{
    generate_dataset, run_replications, Mechanism, ReplicationConfig, ScenarioSpec,
};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn replications(c: &mut Criterion) {
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    let spec = ScenarioSpec::new(Mechanism::NonLinear, 2, 1000, 1);
    let config = ReplicationConfig::default();
    for (name, exec) in MODES {
        group.bench_with_input(
            BenchmarkId::new(name, "nonlinear_p2_n1000_x16"),
            &exec,
            |b, &exec| b.iter(|| run_replications(&spec, 16, &config, exec).unwrap()),
        );
    }
    group.finish();
}

fn calibration(c: &mut Criterion) {
    let mut group = c.benchmark_group("calibrate");
    group.sample_size(10);
    let spec = ScenarioSpec {
        grid_size: 400,
        custom: true,
        ..ScenarioSpec::new(Mechanism::Linear, 5, 5000, 2)
    };
    let data = generate_dataset(&spec).unwrap();
    let weights = IpwWeights::uniform(&data.delta);
    for (name, exec) in MODES {
        let cfg = CalibrationConfig {
            exec,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new(name, "p5_n5000_g400"), &cfg, |b, cfg| {
            b.iter(|| calibrate(&data, &weights, 0.05, cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replications, calibration);
criterion_main!(benches);
