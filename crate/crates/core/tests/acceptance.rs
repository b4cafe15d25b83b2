//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 9 are known to be unattainable with a faithful implementation (see
//! the README). They still print FAIL when they fail, but only an unexpected failure
//! makes the process exit nonzero.

use std::process::ExitCode;
use std::time::Instant;

use dcp_core::exec::ExecMode;
use dcp_core::graph::{build_topology, Topology, TopologyKind, TopologyParams};
use dcp_core::harness::{run_sweep, DataSource, ExperimentConfig, Method, ResultRow};
use dcp_core::hdcp::{
    centralized_quantized_index, consensus_decay_violation, run_hdcp, run_hdcp_with, HdcpConfig, HistogramState,
};
use dcp_core::graph::best_constant_consensus;
use dcp_core::linalg::{solve_spd, Matrix};
use dcp_core::qdcp::{
    consensus_minimizer, dense_constraint_matrices, run_qdcp, target_quantile, z_update, AdmmNetwork, AnchorMode,
    QdcpConfig, UStarSource,
};
use dcp_core::quantile::{
    centralized_smoothed_minimizer, conformal_level, epsilon_tilde_0, quantile_rank, smooth_relu, PinballParams,
};
use dcp_core::scores::{generate_synthetic, histogram_counts, local_histogram, CalibrationData, SyntheticConfig};
use dcp_core::wire::FloatWidth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_UNATTAINED: [usize; 2] = [7, 9];
const MC_TOL: f64 = 0.02;
const NUM_LABELS: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn synthetic(k: usize, num_test: usize) -> DataSource {
    DataSource::Synthetic(SyntheticConfig::uniform(k, 50, NUM_LABELS, num_test, 0))
}

fn sweep(cfg: &ExperimentConfig) -> Vec<ResultRow> {
    let rows = run_sweep(cfg, ExecMode::Parallel).expect("valid sweep config");
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        panic!("sweep row failed: {:?}", r.error);
    }
    rows
}

fn mean(rows: &[&ResultRow], f: impl Fn(&ResultRow) -> Option<f64>) -> f64 {
    rows.iter().map(|r| f(r).expect("successful row")).sum::<f64>() / rows.len() as f64
}

/// Five named topologies, minus the torus when `k` has no two-sided factorization.
fn topologies_for(k: usize) -> Vec<TopologyKind> {
    TopologyKind::NAMED
        .into_iter()
        .filter(|&t| t != TopologyKind::Torus || dcp_core::graph::default_torus_dims(k).is_some())
        .collect()
}

/// Coverage rows grouped by (K, topology, alpha), checked against `1 − α − tol`.
fn coverage_verdict(rows: &[ResultRow]) -> Verdict {
    let mut keys: Vec<(usize, Option<TopologyKind>, u64)> = Vec::new();
    for r in rows {
        let key = (r.k, r.topology, r.alpha.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for (k, topo, a) in keys {
        let alpha = f64::from_bits(a);
        let group: Vec<_> = rows
            .iter()
            .filter(|r| r.k == k && r.topology == topo && r.alpha == alpha)
            .collect();
        let cov = mean(&group, |r| r.coverage);
        let slack = cov - (1.0 - alpha);
        worst = worst.min(slack);
        if cov < 1.0 - alpha - MC_TOL {
            failures.push(format!("K={k} {topo:?} alpha={alpha}: {cov:.4}"));
        }
    }
    verdict(
        failures.is_empty(),
        format!("worst mean coverage - (1-alpha) = {worst:+.4}; failures: {failures:?}"),
    )
}

fn criterion_1() -> Verdict {
    let mut rows = Vec::new();
    for k in [5, 20] {
        let cfg = ExperimentConfig {
            methods: vec![Method::Hdcp],
            topologies: topologies_for(k),
            topology_params: TopologyParams::default(),
            data: synthetic(k, 1000),
            alphas: vec![0.1, 0.2],
            qdcp_t_grid: None,
            hdcp_t_grid: None,
            m_grid: None,
            kappa_grid: None,
            mu_grid: None,
            epsilon0_grid: None,
            float_width_grid: None,
            qdcp: QdcpConfig::default(),
            hdcp: HdcpConfig {
                m: 200,
                t: 150,
                eta: 1.0,
                ..HdcpConfig::default()
            },
            enforce_anchor: false,
            trials: 200,
            base_seed: 1_000,
        };
        rows.extend(sweep(&cfg));
    }
    coverage_verdict(&rows)
}

fn criterion_2() -> Verdict {
    let mut rows = Vec::new();
    for k in [5, 20] {
        let cfg = ExperimentConfig {
            methods: vec![Method::Qdcp],
            topologies: topologies_for(k),
            topology_params: TopologyParams::default(),
            data: synthetic(k, 1000),
            alphas: vec![0.1, 0.2],
            qdcp_t_grid: None,
            hdcp_t_grid: None,
            m_grid: None,
            kappa_grid: None,
            mu_grid: None,
            epsilon0_grid: None,
            float_width_grid: None,
            qdcp: QdcpConfig {
                t: 1500,
                kappa: 2000.0,
                mu: 2000.0,
                epsilon0: 0.1,
                ..QdcpConfig::default()
            },
            hdcp: HdcpConfig::default(),
            enforce_anchor: true,
            trials: 200,
            base_seed: 2_000,
        };
        rows.extend(sweep(&cfg));
    }
    coverage_verdict(&rows)
}

fn random_instance(rng: &mut ChaCha8Rng, max_k: usize) -> (CalibrationData, f64) {
    loop {
        let k = rng.random_range(2..=max_k);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(5..=80)).collect();
        let alpha = rng.random_range(0.05..0.3);
        let cfg = SyntheticConfig {
            n_k: sizes,
            ..SyntheticConfig::uniform(k, 0, 2, 0, rng.random())
        };
        let (cal, _) = generate_synthetic(&cfg).unwrap();
        let gamma = conformal_level(alpha, k, cal.total());
        if quantile_rank(cal.total(), gamma) <= cal.total() {
            return (cal, alpha);
        }
    }
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut held = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let (cal, alpha) = random_instance(&mut rng, 20);
        let s_star = target_quantile(&cal, alpha).unwrap();
        let s0 = s_star + rng.random_range(-0.3..0.3);
        let params = PinballParams {
            gamma: conformal_level(alpha, cal.num_devices(), cal.total()),
            kappa: 10f64.powf(rng.random_range(1.3..3.7)),
            mu: 10f64.powf(rng.random_range(0.0..3.7)),
            s0,
            epsilon0: (s0 - s_star).abs() * rng.random_range(1.0..1.5),
        };
        let s_hat = consensus_minimizer(&cal, &params).unwrap();
        let bound = epsilon_tilde_0(cal.total(), &params).unwrap();
        let gap = (s_hat - s_star).abs();
        worst_ratio = worst_ratio.max(gap / bound);
        if gap <= bound {
            held += 1;
        }
    }
    verdict(
        held == 100,
        format!("{held}/100 instances; max |s_hat - s*| / eps_tilde_0 = {worst_ratio:.3}"),
    )
}

const C4_SIZES: [usize; 6] = [6, 8, 9, 12, 16, 20];

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = Vec::new();
    let mut checked = 0usize;
    let mut tightest = f64::INFINITY;
    for instance in 0..20 {
        let k = C4_SIZES[rng.random_range(0..C4_SIZES.len())];
        let kind = TopologyKind::NAMED[rng.random_range(0..TopologyKind::NAMED.len())];
        let topo = build_topology(kind, k, &TopologyParams::default()).unwrap();
        let (cal, _) = generate_synthetic(&SyntheticConfig::uniform(k, 50, 2, 0, rng.random())).unwrap();
        let cfg = QdcpConfig {
            t: 400,
            u_star: UStarSource::ReferenceRun,
            float_width: FloatWidth::F64,
            log_every: 1,
            ..QdcpConfig::default()
        };
        let run = run_qdcp(&cal, &cfg, &topo).unwrap();
        let s_hat = run.s_hat_star.expect("reference run gives s_hat");
        for p in &run.trajectory {
            checked += 1;
            let gap = (p.s_bar - s_hat).abs();
            tightest = tightest.min(p.eps_t - gap);
            if gap > p.eps_t {
                violations.push(format!("#{instance} {kind} K={k} t={}", p.t));
            }
        }
    }
    verdict(
        violations.is_empty(),
        format!(
            "{checked} logged iterates (T <= 400); min eps_T - |s_bar - s_hat| = {tightest:.3e}; violations: {:?}",
            violations.iter().take(5).collect::<Vec<_>>()
        ),
    )
}

fn criterion_5() -> Verdict {
    let cfg = HdcpConfig {
        m: 200,
        t: 150,
        ..HdcpConfig::default()
    };
    let mut violations = Vec::new();
    let mut raw_exceed = 0usize;
    for kind in TopologyKind::NAMED {
        let topo = build_topology(kind, 20, &TopologyParams::default()).unwrap();
        let w = best_constant_consensus(&topo).unwrap();
        let contraction = 1.0 - cfg.eta * w.spectral_gap;
        for seed in 0..10 {
            let (cal, _) = generate_synthetic(&SyntheticConfig::uniform(20, 50, 2, 0, 500 + seed)).unwrap();
            let run = run_hdcp_with(&cal, &cfg, &w, true).unwrap();
            let trace = run.decay_trace.unwrap();
            let x0 = HistogramState::initial(&cal, cfg.m).unwrap();
            if let Some(t) = consensus_decay_violation(&trace, contraction, x0.frobenius_norm()) {
                violations.push(format!("{kind} seed={seed} t={t}"));
            }
            raw_exceed += trace
                .iter()
                .enumerate()
                .filter(|(t, e)| **e > contraction.powi(2 * *t as i32) * trace[0])
                .count();
        }
    }
    verdict(
        violations.is_empty(),
        format!(
            "5 topologies x 10 seeds x 151 rounds; violations beyond round-off: {violations:?}; \
             rounds exceeding the bound by round-off only: {raw_exceed}"
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut worst_low: f64 = 0.0;
    let mut worst_high = f64::NEG_INFINITY;
    let mut pass = true;
    for kappa in [20.0, 200.0, 2000.0] {
        let bound = std::f64::consts::LN_2 / kappa;
        for i in 0..10_000 {
            let x = -1.0 + 2.0 * i as f64 / 9_999.0;
            let gap = smooth_relu(x, kappa) - x.max(0.0);
            worst_low = worst_low.min(gap);
            worst_high = worst_high.max(gap - bound);
            if gap < -1e-12 || gap > bound + 1e-12 {
                pass = false;
            }
        }
    }
    verdict(
        pass,
        format!("min gap {worst_low:.2e}; max gap - log2/kappa {worst_high:.2e}"),
    )
}

fn paper_setup(methods: Vec<Method>, topologies: Vec<TopologyKind>, trials: usize, base_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        methods,
        topologies,
        topology_params: TopologyParams::default(),
        data: synthetic(20, 1000),
        alphas: vec![0.1],
        qdcp_t_grid: None,
        hdcp_t_grid: None,
        m_grid: None,
        kappa_grid: None,
        mu_grid: None,
        epsilon0_grid: None,
        float_width_grid: None,
        qdcp: QdcpConfig {
            t: 1500,
            epsilon0: 0.1,
            float_width: FloatWidth::F64,
            ..QdcpConfig::default()
        },
        hdcp: HdcpConfig::default(),
        enforce_anchor: false,
        trials,
        base_seed,
    }
}

fn set_size_by_topology(rows: &[ResultRow], kind: TopologyKind) -> f64 {
    let group: Vec<_> = rows.iter().filter(|r| r.topology == Some(kind)).collect();
    mean(&group, |r| r.norm_set_size)
}

fn criterion_7() -> Verdict {
    let order = [
        TopologyKind::Complete,
        TopologyKind::Torus,
        TopologyKind::Cycle,
        TopologyKind::Chain,
    ];
    let mut cfg = paper_setup(vec![Method::Fcp, Method::Qdcp], order.to_vec(), 10, 7_000);
    let rows = sweep(&cfg);
    let fcp_rows: Vec<_> = rows.iter().filter(|r| r.method == Method::Fcp).collect();
    let fcp = mean(&fcp_rows, |r| r.norm_set_size);
    let sizes: Vec<f64> = order.iter().map(|&k| set_size_by_topology(&rows, k)).collect();
    let ordered = sizes.windows(2).all(|w| w[0] <= w[1]);
    let rel = (sizes[0] - fcp) / fcp;
    let close = rel.abs() <= 0.05;

    // diagnostic: the same runs with the tightest valid anchor tolerance
    cfg.methods = vec![Method::Qdcp];
    cfg.topologies = vec![TopologyKind::Complete];
    cfg.qdcp.epsilon0 = 0.0;
    cfg.enforce_anchor = true;
    let tight = sweep(&cfg);
    let tight_rows: Vec<_> = tight.iter().collect();
    let tight_size = mean(&tight_rows, |r| r.norm_set_size);

    verdict(
        ordered && close,
        format!(
            "sizes complete/torus/cycle/chain = {:.4}/{:.4}/{:.4}/{:.4} (ordered: {ordered}); FCP {fcp:.4}; \
             complete vs FCP {:+.1}% (within 5%: {close}); oracle-tight eps0 gives {tight_size:.4} ({:+.1}%)",
            sizes[0],
            sizes[1],
            sizes[2],
            sizes[3],
            100.0 * rel,
            100.0 * (tight_size - fcp) / fcp
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut cfg = paper_setup(vec![Method::Qdcp], vec![TopologyKind::Complete], 10, 8_000);
    cfg.qdcp.s0_mode = AnchorMode::Explicit;
    cfg.qdcp.s0 = Some(-10.0);
    cfg.qdcp.epsilon0 = 1e-4;
    cfg.qdcp.mu = 2000.0;
    let rows = sweep(&cfg);
    let all: Vec<_> = rows.iter().collect();
    let cov = mean(&all, |r| r.coverage);
    verdict(cov < 0.9, format!("mean coverage {cov:.4} (target 0.9)"))
}

const C9_HDCP_T: [usize; 4] = [1, 10, 25, 40];
const C9_M: usize = 1000;

fn criterion_9() -> Verdict {
    let mut lines = Vec::new();
    let mut last = None;
    for &th in &C9_HDCP_T {
        let tq = th * C9_M;
        let mut cfg = paper_setup(vec![Method::Qdcp, Method::Hdcp], vec![TopologyKind::Torus], 10, 9_000);
        cfg.qdcp.t = tq;
        cfg.qdcp.epsilon0 = 0.1;
        cfg.enforce_anchor = true;
        cfg.hdcp = HdcpConfig {
            m: C9_M,
            t: th,
            float_width: FloatWidth::F64,
            ..HdcpConfig::default()
        };
        let rows = sweep(&cfg);
        let q: Vec<_> = rows.iter().filter(|r| r.method == Method::Qdcp).collect();
        let h: Vec<_> = rows.iter().filter(|r| r.method == Method::Hdcp).collect();
        let (qs, hs) = (mean(&q, |r| r.norm_set_size), mean(&h, |r| r.norm_set_size));
        let (qc, hc) = (mean(&q, |r| r.coverage), mean(&h, |r| r.coverage));
        assert_eq!(q[0].comm_bits, h[0].comm_bits, "budgets must match");
        lines.push(format!(
            "bits={} q(T={tq}) size {qs:.4} cov {qc:.3} | h(T={th}) size {hs:.4} cov {hc:.3}",
            q[0].comm_bits.unwrap()
        ));
        last = Some((qs, hs, qc, hc));
    }
    let (qs, hs, qc, hc) = last.unwrap();
    let floor = 0.9 - MC_TOL;
    verdict(
        qs <= hs && qc >= floor && hc >= floor,
        format!("at largest budget q size {qs:.4} vs h size {hs:.4}; budgets: [{}]", lines.join("; ")),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut notes = Vec::new();
    let mut pass = true;

    // z-update closed form against the dense least-squares solve
    let mut z_err: f64 = 0.0;
    for kind in TopologyKind::NAMED {
        let topo = build_topology(kind, 12, &TopologyParams::default()).unwrap();
        let (cal, _) = generate_synthetic(&SyntheticConfig::uniform(12, 10, 2, 0, rng.random())).unwrap();
        let c = rng.random_range(0.1..100.0);
        let params = PinballParams {
            gamma: 0.9,
            kappa: 200.0,
            mu: 1.0,
            s0: 0.5,
            epsilon0: 0.1,
        };
        let net = AdmmNetwork::new(&topo, &cal, params, c, FloatWidth::F64).unwrap();
        let mut st = net.initial_state();
        for v in st
            .s
            .iter_mut()
            .chain(st.z.iter_mut())
            .chain(st.lambda_tail.iter_mut())
            .chain(st.lambda_head.iter_mut())
        {
            *v = rng.random_range(-2.0..2.0);
        }
        let (a, b) = dense_constraint_matrices(&topo);
        let lambda: Vec<f64> = st.lambda_tail.iter().chain(&st.lambda_head).copied().collect();
        let rhs: Vec<f64> = a.mul_vec(&st.s).iter().zip(&lambda).map(|(x, l)| c * x + l).collect();
        let bt = b.transpose();
        let btb = bt.matmul(&b);
        let mut scaled = Matrix::zeros(btb.rows(), btb.cols());
        for i in 0..btb.rows() {
            for j in 0..btb.cols() {
                scaled[(i, j)] = c * btb[(i, j)];
            }
        }
        let neg: Vec<f64> = bt.mul_vec(&rhs).iter().map(|v| -v).collect();
        let dense = solve_spd(&scaled, &neg).unwrap();
        let closed = z_update(&st, &net, &st.s);
        for (x, y) in closed.iter().zip(&dense) {
            z_err = z_err.max((x - y).abs());
        }
    }
    pass &= z_err <= 1e-10;
    notes.push(format!("z-update max diff {z_err:.1e}"));

    // single-device Q-DCP against the centralized smoothed minimizer
    let mut q_err: f64 = 0.0;
    let mut h_exact = true;
    for seed in 0..10 {
        let (cal, _) = generate_synthetic(&SyntheticConfig::uniform(1, 200, 2, 0, seed)).unwrap();
        let cfg = QdcpConfig {
            s0_mode: AnchorMode::Explicit,
            s0: Some(0.4),
            ..QdcpConfig::default()
        };
        let run = run_qdcp(&cal, &cfg, &Topology::singleton()).unwrap();
        let params = PinballParams {
            gamma: conformal_level(cfg.alpha, 1, cal.total()),
            kappa: cfg.kappa,
            mu: cfg.mu,
            s0: 0.4,
            epsilon0: cfg.epsilon0,
        };
        let central = centralized_smoothed_minimizer(cal.device(0), &params).unwrap();
        q_err = q_err.max((run.s_bar - central).abs());

        let hcfg = HdcpConfig::default();
        let h = run_hdcp(&cal, &hcfg, &Topology::singleton()).unwrap();
        h_exact &= h.indices[0] == centralized_quantized_index(&cal, hcfg.alpha, hcfg.m).unwrap();
    }
    pass &= q_err <= 1e-8 && h_exact;
    notes.push(format!("K=1 Q-DCP max diff {q_err:.1e}; K=1 H-DCP index exact: {h_exact}"));

    // weighted local histograms against the pooled histogram
    let mut hist_err: f64 = 0.0;
    let mut counts_exact = true;
    for seed in 0..10 {
        let sizes: Vec<usize> = (0..15).map(|_| rng.random_range(1..60)).collect();
        let cfg = SyntheticConfig {
            n_k: sizes,
            ..SyntheticConfig::uniform(15, 0, 2, 0, 100 + seed)
        };
        let (cal, _) = generate_synthetic(&cfg).unwrap();
        let levels = 50;
        let pooled = local_histogram(&cal.pooled(), levels).unwrap();
        let mixed = HistogramState::initial(&cal, levels).unwrap().column_means();
        for (a, b) in mixed.iter().zip(&pooled) {
            hist_err = hist_err.max((a - b).abs());
        }
        let mut summed = vec![0u64; levels];
        for d in cal.devices() {
            for (s, c) in summed.iter_mut().zip(histogram_counts(d, levels).unwrap()) {
                *s += c;
            }
        }
        counts_exact &= summed == histogram_counts(&cal.pooled(), levels).unwrap();
    }
    pass &= hist_err <= 1e-12 && counts_exact;
    notes.push(format!("histogram max diff {hist_err:.1e}; integer counts exact: {counts_exact}"));

    verdict(pass, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "H-DCP coverage", criterion_1),
        (2, "Q-DCP coverage under a valid anchor", criterion_2),
        (3, "bias bound", criterion_3),
        (4, "ADMM convergence bound", criterion_4),
        (5, "consensus decay", criterion_5),
        (6, "smoothing bound", criterion_6),
        (7, "connectivity vs set size", criterion_7),
        (8, "violated anchor undercovers", criterion_8),
        (9, "equal-bit communication trade-off", criterion_9),
        (10, "oracle equivalences", criterion_10),
    ];
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let known = if !v.pass && KNOWN_UNATTAINED.contains(&id) {
            " [known]"
        } else {
            ""
        };
        println!("{tag} criterion {id} ({name}){known} [{secs:.1}s]: {}", v.detail);
        if !v.pass && known.is_empty() {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
