//! Command-line front end: declarative TOML configs, flag overrides, and
//! JSON/CSV outputs with full provenance in a `meta` section.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cov::CovarianceModel;
use crate::dgp::{self, DgpSpec};
use crate::engine::{self, RunOptions};
use crate::error::{Error, Result};
use crate::ingest::{self, DatasetSpec};
use crate::params::ParamId;
use crate::population::{derive_population, Population};
use crate::summary::DistributionSummary;

#[derive(Parser, Debug)]
#[command(
    name = "covsamp",
    version,
    about = "Sampling distributions of sensitivity parameters under random covariate selection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Exact distribution over every covariate subset of size d1.
    Enumerate(CommonArgs),
    /// Monte Carlo distribution over uniform subset draws.
    Sample(CommonArgs),
    /// Analytic limit values over an r grid.
    Limits(CommonArgs),
    /// Monte Carlo means along a K grid against the analytic limits.
    Convergence(CommonArgs),
    /// Empirical covariance of a dataset as a population model.
    Calibrate(CommonArgs),
    /// Regularity diagnostics of a synthetic specification.
    ValidateDgp(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 or omitted uses all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated parameter names.
    #[arg(long, value_delimiter = ',')]
    pub params: Option<Vec<String>>,
    /// Comma-separated list of observed-block sizes.
    #[arg(long, value_delimiter = ',')]
    pub d1: Option<Vec<usize>>,
    /// Force absolute values on or off for every parameter.
    #[arg(long, value_parser = ["on", "off"])]
    pub abs: Option<String>,
    /// Enumeration cap (number of masks).
    #[arg(long)]
    pub cap: Option<u64>,
    #[arg(long)]
    pub n_draws: Option<u64>,
    /// Total number of covariates for synthetic populations.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated K grid for convergence / validation.
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
    /// Comma-separated unobserved/observed ratios.
    #[arg(long, value_delimiter = ',')]
    pub r: Option<Vec<f64>>,
}

/// File-backed configuration; every field can be overridden by a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: Option<DgpSpec>,
    pub dataset: Option<DatasetSpec>,
    /// Path to a covariance model document produced by `calibrate`.
    pub model: Option<PathBuf>,
    pub k: Option<usize>,
    pub d1: Option<Vec<usize>>,
    pub params: Option<Vec<String>>,
    pub n_draws: Option<u64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub cap: Option<u64>,
    pub abs: Option<bool>,
    pub k_grid: Option<Vec<usize>>,
    pub r: Option<Vec<f64>>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    fn merge_flags(mut self, args: &CommonArgs) -> Result<RunConfig> {
        if let Some(s) = args.seed {
            self.seed = Some(s);
        }
        if let Some(w) = args.workers {
            self.workers = Some(w);
        }
        if let Some(p) = &args.params {
            self.params = Some(p.clone());
        }
        if let Some(d) = &args.d1 {
            self.d1 = Some(d.clone());
        }
        if let Some(a) = &args.abs {
            self.abs = Some(a == "on");
        }
        if let Some(c) = args.cap {
            self.cap = Some(c);
        }
        if let Some(n) = args.n_draws {
            self.n_draws = Some(n);
        }
        if let Some(k) = args.k {
            self.k = Some(k);
        }
        if let Some(g) = &args.k_grid {
            self.k_grid = Some(g.clone());
        }
        if let Some(r) = &args.r {
            self.r = Some(r.clone());
        }
        Ok(self)
    }

    fn param_ids(&self) -> Result<Vec<ParamId>> {
        match &self.params {
            None => Ok(ParamId::DEFAULT.to_vec()),
            Some(names) => names
                .iter()
                .map(|n| {
                    ParamId::from_name(n)
                        .ok_or_else(|| Error::Config(format!("unknown parameter '{n}'")))
                })
                .collect(),
        }
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            abs_override: self.abs,
            cap: self
                .cap
                .map(|c| c as u128)
                .unwrap_or(crate::design::DEFAULT_ENUMERATION_CAP),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn dgp(&self) -> Result<&DgpSpec> {
        self.dgp
            .as_ref()
            .ok_or_else(|| Error::Config("a [dgp] section is required for this command".into()))
    }

    fn k(&self) -> Result<usize> {
        self.k
            .ok_or_else(|| Error::Config("k (number of covariates) is required".into()))
    }

    /// Population source priority: dataset, then model file, then dgp.
    fn population(&self) -> Result<Population> {
        if let Some(ds) = &self.dataset {
            let (model, _) = ingest::calibrate(ds)?;
            return derive_population(model);
        }
        if let Some(path) = &self.model {
            return derive_population(read_model(path)?);
        }
        if let Some(spec) = &self.dgp {
            return dgp::assemble_population(spec, self.k()?);
        }
        Err(Error::Config(
            "one of [dataset], model, or [dgp] must be provided".into(),
        ))
    }
}

/// Serialized covariance model document.
#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    labels: Vec<String>,
    sigma: Vec<Vec<f64>>,
}

fn read_model(path: &Path) -> Result<CovarianceModel> {
    let text = fs::read_to_string(path)?;
    let doc: ModelDoc =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let n = doc.sigma.len();
    if doc.sigma.iter().any(|row| row.len() != n) {
        return Err(Error::Config("model sigma must be square".into()));
    }
    let mut sigma = ndarray::Array2::zeros((n, n));
    for (i, row) in doc.sigma.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            sigma[(i, j)] = v;
        }
    }
    CovarianceModel::new(doc.labels, sigma)
}

fn model_doc(model: &CovarianceModel) -> ModelDoc {
    let n = model.dim();
    ModelDoc {
        labels: model.labels().to_vec(),
        sigma: (0..n)
            .map(|i| (0..n).map(|j| model.sigma()[(i, j)]).collect())
            .collect(),
    }
}

fn meta(command: &str, config: &RunConfig, workers: usize, wall: f64) -> serde_json::Value {
    json!({
        "command": command,
        "config": config,
        "seed": config.seed(),
        "workers": workers,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_clock_seconds": wall,
        "conventions": {
            "quantiles": "linear interpolation between order statistics",
            "histogram_bins": crate::summary::HISTOGRAM_BINS,
            "lambda": "vector residualization of both coefficient blocks; generalizes the scalar benchmark ratio and need not match single-confounder calibration exactly",
            "abs_defaults": "absolute value applied to the delta family and lambda; raw signs kept for r and k parameters",
        },
    })
}

fn write_or_print(out: &Option<PathBuf>, name: &str, payload: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(payload).map_err(|e| Error::Internal(e.to_string()))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn histogram_csv(out: &Option<PathBuf>, name: &str, summaries: &[DistributionSummary]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(["param", "d1", "bin_lo", "bin_hi", "count"])?;
    for s in summaries {
        for (b, &c) in s.histogram.counts.iter().enumerate() {
            w.write_record([
                s.param.clone(),
                s.d1.to_string(),
                format!("{}", s.histogram.edges[b]),
                format!("{}", s.histogram.edges[b + 1]),
                c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn thread_pool(workers: Option<usize>) -> Result<(rayon::ThreadPool, usize)> {
    let n = match workers {
        Some(0) | None => num_threads_available(),
        Some(n) => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok((pool, n))
}

fn num_threads_available() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn d1_list(config: &RunConfig, k: usize) -> Result<Vec<usize>> {
    let list = config
        .d1
        .clone()
        .ok_or_else(|| Error::Config("d1 list is required".into()))?;
    for &d1 in &list {
        if d1 == 0 || d1 >= k {
            return Err(Error::Config(format!(
                "d1 must lie strictly between 0 and {k}, got {d1}"
            )));
        }
    }
    Ok(list)
}

/// Run a parsed invocation; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Enumerate(args) => dispatch(args, "enumerate", cmd_enumerate),
        Command::Sample(args) => dispatch(args, "sample", cmd_sample),
        Command::Limits(args) => dispatch(args, "limits", cmd_limits),
        Command::Convergence(args) => dispatch(args, "convergence", cmd_convergence),
        Command::Calibrate(args) => dispatch(args, "calibrate", cmd_calibrate),
        Command::ValidateDgp(args) => dispatch(args, "validate-dgp", cmd_validate_dgp),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(
    args: &CommonArgs,
    name: &str,
    f: fn(&CommonArgs, &RunConfig, &str) -> Result<()>,
) -> Result<()> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = base.merge_flags(args)?;
    f(args, &config, name)
}

fn cmd_enumerate(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    distribution_command(args, config, name, |pop, d1, ids, opts, config, pool| {
        let _ = config;
        pool.install(|| engine::exact_distribution(pop, d1, ids, opts))
    })
}

fn cmd_sample(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    distribution_command(args, config, name, |pop, d1, ids, opts, config, pool| {
        let n_draws = config
            .n_draws
            .ok_or_else(|| Error::Config("n_draws is required for sampling".into()))?;
        pool.install(|| {
            engine::monte_carlo_distribution(pop, d1, ids, n_draws, config.seed(), opts)
        })
    })
}

type DistFn = fn(
    &Population,
    usize,
    &[ParamId],
    &RunOptions,
    &RunConfig,
    &rayon::ThreadPool,
) -> Result<Vec<DistributionSummary>>;

fn distribution_command(
    args: &CommonArgs,
    config: &RunConfig,
    name: &str,
    f: DistFn,
) -> Result<()> {
    let start = Instant::now();
    let pop = config.population()?;
    let ids = config.param_ids()?;
    let opts = config.run_options();
    let d1s = d1_list(config, pop.k())?;
    let (pool, workers) = thread_pool(config.workers)?;
    let mut summaries = Vec::new();
    for d1 in d1s {
        summaries.extend(f(&pop, d1, &ids, &opts, config, &pool)?);
    }
    let doc = json!({
        "meta": meta(name, config, workers, start.elapsed().as_secs_f64()),
        "summaries": summaries,
    });
    write_or_print(&args.out, &format!("{name}.json"), &doc)?;
    histogram_csv(&args.out, &format!("{name}_histogram.csv"), &summaries)
}

fn cmd_limits(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    let start = Instant::now();
    let spec = config.dgp()?;
    let k = config.k()?;
    let rs = config
        .r
        .clone()
        .ok_or_else(|| Error::Config("an r list is required".into()))?;
    let ids = config.param_ids()?;
    let mut rows = Vec::new();
    for &r in &rs {
        if r <= 0.0 {
            return Err(Error::Config(format!("r must be positive, got {r}")));
        }
        for &id in &ids {
            let value = engine::predicted_limit(spec, k, id, r)?;
            rows.push(json!({
                "param": id.name(),
                "r": r,
                "k": k,
                "limit": value,
            }));
        }
    }
    let doc = json!({
        "meta": meta(name, config, 1, start.elapsed().as_secs_f64()),
        "limits": rows,
    });
    write_or_print(&args.out, &format!("{name}.json"), &doc)
}

fn cmd_convergence(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    let start = Instant::now();
    let spec = config.dgp()?;
    let k_grid = config
        .k_grid
        .clone()
        .ok_or_else(|| Error::Config("a k_grid is required".into()))?;
    let rs = config
        .r
        .clone()
        .ok_or_else(|| Error::Config("an r list is required".into()))?;
    let n_draws = config
        .n_draws
        .ok_or_else(|| Error::Config("n_draws is required".into()))?;
    let ids = config.param_ids()?;
    let opts = config.run_options();
    let (pool, workers) = thread_pool(config.workers)?;
    let mut points = Vec::new();
    for &r in &rs {
        let pts = pool.install(|| {
            engine::convergence_study(spec, &k_grid, r, &ids, n_draws, config.seed(), &opts)
        })?;
        points.extend(pts);
    }
    let doc = json!({
        "meta": meta(name, config, workers, start.elapsed().as_secs_f64()),
        "points": points,
    });
    write_or_print(&args.out, &format!("{name}.json"), &doc)
}

fn cmd_calibrate(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    let start = Instant::now();
    let ds = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("a [dataset] section is required".into()))?;
    let (model, table) = ingest::calibrate(ds)?;
    let pop = derive_population(model.clone())?;
    let doc = json!({
        "meta": meta(name, config, 1, start.elapsed().as_secs_f64()),
        "model": model_doc(&model),
        "population": {
            "k": pop.k(),
            "beta_long": pop.beta_long(),
            "r2_x_w": pop.r2_x_w(),
            "r2_y_xw": pop.r2_y_xw(),
            "r2_y_x": pop.r2_y_x(),
            "rows_used": table.rows,
            "rows_dropped": table.dropped_rows,
            "singleton_groups": table.singleton_groups,
        },
    });
    write_or_print(&args.out, &format!("{name}.json"), &doc)?;
    // Standalone model document so the output feeds enumerate/sample runs.
    if args.out.is_some() {
        let model_json = serde_json::to_value(model_doc(&model))
            .map_err(|e| Error::Internal(e.to_string()))?;
        write_or_print(&args.out, "model.json", &model_json)?;
    }
    Ok(())
}

fn cmd_validate_dgp(args: &CommonArgs, config: &RunConfig, name: &str) -> Result<()> {
    let start = Instant::now();
    let spec = config.dgp()?;
    let k_grid = config
        .k_grid
        .clone()
        .ok_or_else(|| Error::Config("a k_grid is required".into()))?;
    let report = dgp::validate_assumptions(spec, &k_grid)?;
    let doc = json!({
        "meta": meta(name, config, 1, start.elapsed().as_secs_f64()),
        "report": report,
    });
    write_or_print(&args.out, &format!("{name}.json"), &doc)
}
