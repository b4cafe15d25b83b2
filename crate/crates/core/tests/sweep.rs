use dcp_core::exec::ExecMode;
use dcp_core::graph::{TopologyKind, TopologyParams};
use dcp_core::harness::{run_sweep, summarize, write_results_csv, DataSource, ExperimentConfig, Method, RESULT_HEADER};
use dcp_core::hdcp::HdcpConfig;
use dcp_core::qdcp::QdcpConfig;
use dcp_core::scores::{generate_synthetic, write_calibration_csv, write_test_csv, SyntheticConfig};

fn base(methods: Vec<Method>, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        methods,
        topologies: TopologyKind::NAMED.to_vec(),
        topology_params: TopologyParams::default(),
        data: DataSource::Synthetic(SyntheticConfig::uniform(8, 20, 10, 50, 0)),
        alphas: vec![0.1],
        qdcp_t_grid: None,
        hdcp_t_grid: None,
        m_grid: None,
        kappa_grid: None,
        mu_grid: None,
        epsilon0_grid: None,
        float_width_grid: None,
        qdcp: QdcpConfig {
            t: 100,
            ..QdcpConfig::default()
        },
        hdcp: HdcpConfig {
            m: 50,
            t: 30,
            ..HdcpConfig::default()
        },
        enforce_anchor: false,
        trials,
        base_seed: 17,
    }
}

fn csv_bytes(cfg: &ExperimentConfig, mode: ExecMode) -> Vec<u8> {
    let rows = run_sweep(cfg, mode).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_results_csv(&path, &rows).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn hdcp_over_named_topologies_gives_fifty_rows() {
    let rows = run_sweep(&base(vec![Method::Hdcp], 10), ExecMode::Parallel).unwrap();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.error.is_none()));
    // ordered by point, then trial
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.trial, i % 10);
        assert_eq!(r.topology, Some(TopologyKind::NAMED[i / 10]));
    }
}

#[test]
fn same_seed_gives_identical_csv_in_either_mode() {
    let cfg = base(vec![Method::Fcp, Method::Qdcp, Method::Hdcp], 3);
    let a = csv_bytes(&cfg, ExecMode::Parallel);
    assert_eq!(a, csv_bytes(&cfg, ExecMode::Parallel));
    assert_eq!(a, csv_bytes(&cfg, ExecMode::Sequential));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_HEADER);
}

#[test]
fn empty_result_still_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_results_csv(&path, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap().trim(), RESULT_HEADER);
}

#[test]
fn failing_point_is_recorded_and_sweep_continues() {
    // seven nodes cannot form a torus
    let mut cfg = base(vec![Method::Hdcp], 2);
    cfg.data = DataSource::Synthetic(SyntheticConfig::uniform(7, 20, 10, 50, 0));
    cfg.topologies = vec![TopologyKind::Torus, TopologyKind::Cycle];
    let rows = run_sweep(&cfg, ExecMode::Sequential).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[..2].iter().all(|r| r.error.is_some() && r.coverage.is_none()));
    assert!(rows[2..].iter().all(|r| r.error.is_none() && r.coverage.is_some()));
}

#[test]
fn grids_expand_as_cartesian_product() {
    let mut cfg = base(vec![Method::Qdcp], 1);
    cfg.topologies = vec![TopologyKind::Complete];
    cfg.alphas = vec![0.1, 0.2];
    cfg.qdcp_t_grid = Some(vec![10, 20, 30]);
    cfg.mu_grid = Some(vec![100.0, 2000.0]);
    assert_eq!(cfg.points().len(), 12);
    let rows = run_sweep(&cfg, ExecMode::Parallel).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0].comm_bits, Some(10 * 64));
}

#[test]
fn metrics_stay_in_unit_interval_and_summaries_cover_points() {
    let cfg = base(vec![Method::CentralizedCp, Method::Fcp, Method::Qdcp, Method::Hdcp], 4);
    let rows = run_sweep(&cfg, ExecMode::Parallel).unwrap();
    for r in &rows {
        let (c, s) = (r.coverage.unwrap(), r.norm_set_size.unwrap());
        assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&s));
    }
    let summary = summarize(&cfg, &rows);
    assert_eq!(summary.len(), cfg.points().len());
}

#[test]
fn file_source_matches_synthetic_source() {
    let syn = SyntheticConfig::uniform(6, 25, 10, 80, 17);
    let (cal, tests) = generate_synthetic(&syn).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (cp, tp) = (dir.path().join("cal.csv"), dir.path().join("test.csv"));
    write_calibration_csv(&cp, &cal).unwrap();
    write_test_csv(&tp, &tests).unwrap();

    let mut from_files = base(vec![Method::Fcp, Method::Hdcp], 1);
    from_files.topologies = vec![TopologyKind::Cycle];
    from_files.data = DataSource::Files {
        calibration: cp,
        test: tp,
        clip: false,
    };
    let mut from_syn = from_files.clone();
    from_syn.data = DataSource::Synthetic(syn);
    let a = run_sweep(&from_files, ExecMode::Sequential).unwrap();
    let b = run_sweep(&from_syn, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = base(vec![Method::Qdcp, Method::Hdcp], 5);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(cfg, back);
}
