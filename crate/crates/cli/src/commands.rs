use std::path::Path;

use clap::Args;
use dcp_core::exec::{with_jobs, ExecMode};
use dcp_core::graph::{
    best_constant_consensus, build_topology, SpectralSummary, Topology, TopologyKind, TopologyParams,
};
use dcp_core::harness::{
    evaluate_coverage, min_nontrivial_t, run_centralized_baselines, run_sweep, summarize, write_results_csv,
    DataSource, ExperimentConfig, MethodOutcome,
};
use dcp_core::hdcp::{hdcp_prediction_set, run_hdcp as run_hdcp_core, write_hdcp_csv, HdcpConfig};
use dcp_core::qdcp::{qdcp_prediction_set, run_qdcp as run_qdcp_core, write_trajectory_csv, QdcpConfig};
use dcp_core::scores::{
    generate_synthetic, ingest_scores, write_calibration_csv, write_test_csv, CalibrationData, SyntheticConfig,
    TestInstance,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, Manifest};
use crate::error::CliError;

const DEFAULT_SWEEP: &str = include_str!("../presets/fig2.json");

pub struct Context<'a> {
    pub name: &'static str,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub overrides: &'a [(String, Value)],
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub log_every: Option<usize>,
    pub clip: bool,
}

/// Keys the dedicated flags map to for one subcommand.
#[derive(Default)]
struct FlagKeys {
    seed: &'static [&'static str],
    log_every: Option<&'static str>,
    /// Prefix of a data source object that `--clip` applies to.
    data: Option<&'static str>,
}

impl Context<'_> {
    /// File config (or `default`), then `--set` overrides, then dedicated flags.
    /// Writes the manifest before anything runs.
    fn resolve<T>(&self, default: Value, keys: FlagKeys) -> Result<T, CliError>
    where
        T: Serialize + DeserializeOwned,
    {
        let mut value = config::load(self.config, default)?;
        config::apply_overrides(&mut value, self.overrides)?;
        let mut flags = Vec::new();
        if let Some(seed) = self.seed {
            for key in keys.seed {
                if key.starts_with("data.") && !is_synthetic(&value, "data") {
                    continue;
                }
                flags.push((key.to_string(), json!(seed)));
            }
        }
        if let Some(n) = self.log_every {
            let key = keys
                .log_every
                .ok_or_else(|| CliError::Config(format!("--log-every does not apply to {}", self.name)))?;
            flags.push((key.to_string(), json!(n)));
        }
        if self.clip {
            match keys.data.filter(|d| config::get_path(&value, &format!("{d}.source")) == Some(&json!("files"))) {
                Some(d) => flags.push((format!("{d}.clip"), json!(true))),
                None => return Err(CliError::Config("--clip applies to file-based score data only".into())),
            }
        }
        config::apply_overrides(&mut value, &flags)?;
        let resolved: T = config::decode(&value)?;
        let all: Vec<_> = self.overrides.iter().chain(&flags).cloned().collect();
        let manifest = Manifest::new(self.name, &all, self.jobs, config::encode(&resolved));
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(resolved)
    }
}

fn is_synthetic(value: &Value, data_key: &str) -> bool {
    config::get_path(value, &format!("{data_key}.source")) == Some(&json!("synthetic"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("artifacts serialize to JSON");
    std::fs::write(path, text + "\n").map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn default_data() -> DataSource {
    DataSource::Synthetic(SyntheticConfig::uniform(20, 50, 100, 1000, 0))
}

fn default_topology() -> TopologyKind {
    TopologyKind::Torus
}

/// Single-run config: data, graph, and the method's own fields at top level.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfig<M> {
    #[serde(default = "default_data")]
    data: DataSource,
    #[serde(default = "default_topology")]
    topology: TopologyKind,
    #[serde(default)]
    topology_params: TopologyParams,
    /// Edge list for `custom` topologies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 2]>>,
    #[serde(flatten)]
    method: M,
}

impl<M: Default> Default for RunConfig<M> {
    fn default() -> Self {
        Self {
            data: default_data(),
            topology: default_topology(),
            topology_params: TopologyParams::default(),
            edges: None,
            method: M::default(),
        }
    }
}

impl<M> RunConfig<M> {
    fn topology(&self, k: usize) -> Result<Topology, CliError> {
        if k == 1 {
            return Ok(Topology::singleton());
        }
        Ok(match (self.topology, &self.edges) {
            (TopologyKind::Custom, Some(edges)) => {
                Topology::new(TopologyKind::Custom, k, edges.iter().map(|&[i, j]| (i, j)).collect())?
            }
            (kind, _) => build_topology(kind, k, &self.topology_params)?,
        })
    }
}

const RUN_KEYS: FlagKeys = FlagKeys {
    seed: &["data.seed", "topology_params.seed"],
    log_every: None,
    data: Some("data"),
};

fn load_data(source: &DataSource) -> Result<(CalibrationData, Vec<TestInstance>), CliError> {
    Ok(match source {
        DataSource::Synthetic(cfg) => generate_synthetic(cfg)?,
        DataSource::Files { calibration, test, clip } => ingest_scores(calibration, test, *clip)?,
    })
}

#[derive(Serialize)]
struct Metrics {
    coverage: f64,
    norm_set_size: f64,
    num_test: usize,
}

pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    let default = config::encode(&SyntheticConfig::uniform(20, 50, 100, 1000, 0));
    let cfg: SyntheticConfig = ctx.resolve(
        default,
        FlagKeys {
            seed: &["seed"],
            ..FlagKeys::default()
        },
    )?;
    let (cal, tests) = generate_synthetic(&cfg)?;
    write_calibration_csv(&ctx.out.join("calibration.csv"), &cal)?;
    write_test_csv(&ctx.out.join("test.csv"), &tests)?;
    println!(
        "wrote {} calibration scores on {} devices and {} test points to {}",
        cal.total(),
        cal.num_devices(),
        tests.len(),
        ctx.out.display()
    );
    Ok(())
}

pub fn run_qdcp(ctx: &Context) -> Result<(), CliError> {
    let cfg: RunConfig<QdcpConfig> = ctx.resolve(
        config::encode(&RunConfig::<QdcpConfig>::default()),
        FlagKeys {
            log_every: Some("log_every"),
            ..RUN_KEYS
        },
    )?;
    let (cal, tests) = load_data(&cfg.data)?;
    let topo = cfg.topology(cal.num_devices())?;
    let run = run_qdcp_core(&cal, &cfg.method, &topo)?;
    let sets: Vec<_> = tests
        .iter()
        .map(|t| qdcp_prediction_set(t, run.per_device_thresholds[t.device_id]))
        .collect();
    let (coverage, norm_set_size) = evaluate_coverage(&sets, &tests)?;
    write_trajectory_csv(&ctx.out.join("trajectory.csv"), &run.trajectory)?;
    write_json(
        &ctx.out.join("qdcp_run.json"),
        &json!({
            "metrics": Metrics { coverage, norm_set_size, num_test: tests.len() },
            "run": run,
        }),
    )?;
    println!("threshold {:.6} (s_bar {:.6}, s0 {:.6})", run.threshold, run.s_bar, run.s0);
    if let Some(b) = run.bounds {
        println!(
            "eps_T {:.3e}  eps_tilde_0 {:.3e}  delta {:.3e}  c {:.4}",
            b.eps_t, b.eps_tilde_0, b.delta, b.c
        );
    }
    println!("coverage {coverage:.4}  normalized set size {norm_set_size:.4}  comm_bits {}", run.comm_bits);
    Ok(())
}

pub fn run_hdcp(ctx: &Context) -> Result<(), CliError> {
    let cfg: RunConfig<HdcpConfig> = ctx.resolve(config::encode(&RunConfig::<HdcpConfig>::default()), RUN_KEYS)?;
    let (cal, tests) = load_data(&cfg.data)?;
    let topo = cfg.topology(cal.num_devices())?;
    let h = &cfg.method;
    let run = run_hdcp_core(&cal, h, &topo)?;
    let sets: Vec<_> = tests
        .iter()
        .map(|t| hdcp_prediction_set(t, run.indices[t.device_id], h.m))
        .collect();
    let (coverage, norm_set_size) = evaluate_coverage(&sets, &tests)?;
    let nontrivial = min_nontrivial_t(&cal.sizes(), h.alpha, h.m, h.eta, run.rho, 1_000_000);
    write_hdcp_csv(&ctx.out.join("hdcp.csv"), &run)?;
    write_json(
        &ctx.out.join("hdcp_run.json"),
        &json!({
            "metrics": Metrics { coverage, norm_set_size, num_test: tests.len() },
            "min_nontrivial_T": nontrivial,
            "run": run,
        }),
    )?;
    println!(
        "mean threshold {:.4}  eps_hdcp {:.3e}  rho {:.4}",
        run.threshold_mean(),
        run.eps_hdcp,
        run.rho
    );
    match nontrivial {
        Some(t) => println!("sets are nontrivial from T = {t}"),
        None => println!("sets stay trivial for every T"),
    }
    println!("coverage {coverage:.4}  normalized set size {norm_set_size:.4}  comm_bits {}", run.comm_bits);
    Ok(())
}

fn default_alpha() -> f64 {
    0.1
}

#[derive(Debug, Serialize, Deserialize)]
struct CentralConfig {
    #[serde(default = "default_data")]
    data: DataSource,
    #[serde(default = "default_alpha")]
    alpha: f64,
}

pub fn run_central(ctx: &Context) -> Result<(), CliError> {
    let default = config::encode(&CentralConfig {
        data: default_data(),
        alpha: default_alpha(),
    });
    let cfg: CentralConfig = ctx.resolve(
        default,
        FlagKeys {
            seed: &["data.seed"],
            ..RUN_KEYS
        },
    )?;
    let (cal, tests) = load_data(&cfg.data)?;
    let results = run_centralized_baselines(&cal, &tests, cfg.alpha)?;
    let out: Vec<Value> = results
        .iter()
        .map(|(m, o): &(_, MethodOutcome)| json!({"method": m, "outcome": o}))
        .collect();
    write_json(&ctx.out.join("central.json"), &out)?;
    for (m, o) in &results {
        println!(
            "{:<15} threshold {:.6}  coverage {:.4}  normalized set size {:.4}",
            m.as_str(),
            o.threshold_mean(),
            o.coverage,
            o.norm_set_size
        );
    }
    Ok(())
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let default: Value = serde_json::from_str(DEFAULT_SWEEP).expect("bundled preset is valid JSON");
    let cfg: ExperimentConfig = ctx.resolve(
        default,
        FlagKeys {
            seed: &["base_seed"],
            log_every: Some("qdcp.log_every"),
            data: Some("data"),
        },
    )?;
    let rows = with_jobs(ctx.jobs, || run_sweep(&cfg, ExecMode::Parallel))?;
    write_results_csv(&ctx.out.join("results.csv"), &rows)?;
    let summary = summarize(&cfg, &rows);
    write_json(&ctx.out.join("summary.json"), &summary)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} rows over {} points x {} trials ({failed} failed) written to {}",
        rows.len(),
        summary.len(),
        cfg.trials,
        ctx.out.display()
    );
    for s in &summary {
        let p = &s.point;
        let fmt = |o: &Option<dcp_core::harness::Spread>| o.as_ref().map_or("-".into(), |s| format!("{:.4}", s.mean));
        println!(
            "  {:<14} {:<9} alpha={:<5} T={:<6} coverage {}  size {}",
            p.method.as_str(),
            p.topology.map_or("-", TopologyKind::as_str),
            p.alpha,
            p.t.map_or("-".into(), |t| t.to_string()),
            fmt(&s.coverage),
            fmt(&s.norm_set_size),
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// chain, cycle, star, torus, complete or erdos_renyi.
    #[arg(long)]
    kind: Option<String>,
    /// Number of nodes.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Edge probability for erdos_renyi.
    #[arg(long)]
    edge_prob: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphConfig {
    kind: TopologyKind,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default)]
    topology_params: TopologyParams,
}

pub fn inspect_graph(ctx: &Context, args: &GraphArgs) -> Result<(), CliError> {
    let default = config::encode(&GraphConfig {
        kind: TopologyKind::Torus,
        k: 20,
        topology_params: TopologyParams::default(),
    });
    let mut overrides = ctx.overrides.to_vec();
    if let Some(kind) = &args.kind {
        overrides.push(("kind".into(), json!(kind)));
    }
    if let Some(k) = args.k {
        overrides.push(("K".into(), json!(k)));
    }
    if let Some(p) = args.edge_prob {
        overrides.push(("topology_params.edge_prob".into(), json!(p)));
    }
    let ctx = Context {
        overrides: &overrides,
        ..*ctx
    };
    let cfg: GraphConfig = ctx.resolve(
        default,
        FlagKeys {
            seed: &["topology_params.seed"],
            ..FlagKeys::default()
        },
    )?;
    let topo = build_topology(cfg.kind, cfg.k, &cfg.topology_params)?;
    let spectrum = SpectralSummary::compute(&topo)?;
    let w = best_constant_consensus(&topo)?;
    let degrees = topo.degrees();
    write_json(
        &ctx.out.join("graph.json"),
        &json!({
            "topology": topo,
            "degrees": degrees,
            "spectral": spectrum,
            "rho": w.spectral_gap,
        }),
    )?;
    println!("kind {}  K {}  E {}", topo.kind(), topo.num_nodes(), topo.num_edges());
    println!(
        "degrees {}",
        degrees.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    println!(
        "rho {:.6}  |lambda2(W)| {:.6}  sigma_min(M-) {:.6}  sigma_max(M+) {:.6}",
        w.spectral_gap, spectrum.lambda2_w_abs, spectrum.sigma_min_mminus, spectrum.sigma_max_mplus
    );
    println!(
        "lambda_1(L) {:.6}  lambda_K-1(L) {:.6}",
        spectrum.lambda1_l, spectrum.lambda_km1_l
    );
    Ok(())
}
