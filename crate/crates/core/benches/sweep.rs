use criterion::{criterion_group, criterion_main, Criterion};
use dcp_core::exec::ExecMode;
use dcp_core::graph::{TopologyKind, TopologyParams};
use dcp_core::harness::{run_sweep, DataSource, ExperimentConfig, Method};
use dcp_core::hdcp::HdcpConfig;
use dcp_core::qdcp::QdcpConfig;
use dcp_core::scores::SyntheticConfig;

fn small_sweep() -> ExperimentConfig {
    ExperimentConfig {
        methods: vec![Method::Qdcp, Method::Hdcp],
        topologies: vec![TopologyKind::Cycle, TopologyKind::Torus, TopologyKind::Complete],
        topology_params: TopologyParams::default(),
        data: DataSource::Synthetic(SyntheticConfig::uniform(20, 50, 100, 200, 0)),
        alphas: vec![0.1],
        qdcp_t_grid: None,
        hdcp_t_grid: None,
        m_grid: None,
        kappa_grid: None,
        mu_grid: None,
        epsilon0_grid: None,
        float_width_grid: None,
        qdcp: QdcpConfig {
            t: 300,
            ..QdcpConfig::default()
        },
        hdcp: HdcpConfig {
            m: 200,
            t: 100,
            ..HdcpConfig::default()
        },
        enforce_anchor: false,
        trials: 8,
        base_seed: 0,
    }
}

fn bench_sweep(c: &mut Criterion) {
    let cfg = small_sweep();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| run_sweep(&cfg, ExecMode::Parallel).unwrap()));
    group.bench_function("sequential", |b| b.iter(|| run_sweep(&cfg, ExecMode::Sequential).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
