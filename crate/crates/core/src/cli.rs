//! Command-line surface: `fit`, `simulate` and `select`.
//!
//! Data are CSV with a header row, one row per observation. Models are
//! declared in JSON:
//!
//! ```json
//! {
//!   "family": "poisson",
//!   "response": "seizures",
//!   "cluster": "subject",
//!   "offset": "weeks",
//!   "random": ["visit"],
//!   "subject_level": ["log_base4", "trt", "log_age"],
//!   "within_cluster": ["visit4"],
//!   "prior": { "sigma_beta_scale": 1000, "c": 1 },
//!   "parametrization": "partial-fixed",
//!   "options": { "tolerance": 1e-6, "max_iterations": 500 }
//! }
//! ```
//!
//! The random intercept is implied, and `random` lists any further columns
//! with random slopes; they also get fixed effects. Exit codes: 0 when the
//! fit converged, 2 when it ran out of iterations, 1 on any error.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::FitOptions;
use crate::error::{Error, Result};
use crate::init::PriorConfig;
use crate::model::{constant_within_clusters, validate_dataset, ClusterData, Dataset, Family, FitResult, Parametrization, ParamSummary};
use crate::selection::{model_probabilities, ModelComparison, ModelEntry};
use crate::simulate::{simulate_design, SimDesign, SimTag};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the worker count of every fit.
pub const WORKERS_ENV: &str = "GLMMVB_WORKERS";

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub family: Family,
    pub response: String,
    pub cluster: String,
    /// Poisson exposure `E_ij`, entering as `log E_ij`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub subject_level: Vec<String>,
    #[serde(default)]
    pub within_cluster: Vec<String>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default = "default_parametrization")]
    pub parametrization: Parametrization,
    #[serde(default)]
    pub options: FitOptions,
}

fn default_parametrization() -> Parametrization {
    Parametrization::PartialFixed
}

impl ModelConfig {
    /// The configuration under which [`emit_csv`] output reads back as `ds`.
    pub fn describing(ds: &Dataset) -> Self {
        let (r, g1) = (ds.r, ds.g1);
        let has_offset = ds.clusters.iter().any(|c| c.offset.iter().any(|&e| e != 1.0));
        ModelConfig {
            label: None,
            family: ds.family,
            response: "y".into(),
            cluster: "cluster".into(),
            offset: has_offset.then(|| "offset".into()),
            random: ds.random_names[1..].to_vec(),
            subject_level: ds.fixed_names[r..r + g1].to_vec(),
            within_cluster: ds.fixed_names[r + g1..].to_vec(),
            prior: PriorConfig::default(),
            parametrization: default_parametrization(),
            options: FitOptions::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Hex SHA-256 of the canonical JSON, ignoring the worker count so that
    /// runs on different machines agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.options.workers = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.cluster.as_str(), self.response.as_str()];
        cols.extend(self.offset.as_deref());
        cols.extend(self.random.iter().map(String::as_str));
        cols.extend(self.subject_level.iter().map(String::as_str));
        cols.extend(self.within_cluster.iter().map(String::as_str));
        cols
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a CSV file into a validated dataset.
pub fn ingest_csv(path: &Path, config: &ModelConfig) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    ingest_reader(file, &path.display().to_string(), config)
}

/// As [`ingest_csv`], reading from any source; `source` names it in errors.
pub fn ingest_reader(reader: impl Read, source: &str, config: &ModelConfig) -> Result<Dataset> {
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: source.to_string(),
        line,
        msg,
    };
    if config.offset.is_some() && config.family == Family::Bernoulli {
        return Err(Error::Config("an offset column is only meaningful for the poisson family".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let names = config.columns();
    let mut missing = Vec::new();
    let mut cols = Vec::new();
    for &name in &names {
        match index.get(name) {
            Some(&i) => cols.push(i),
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(csv_err(1, format!("missing column(s): {}", missing.join(", "))));
    }
    let (nr, ng1, ng2) = (config.random.len(), config.subject_level.len(), config.within_cluster.len());
    let has_offset = config.offset.is_some();

    // cluster id -> rows of numeric values in column order (response, offset?, random, g1, g2)
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = record.get(cols[0]).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(csv_err(line, format!("empty cluster id in column {:?}", config.cluster)));
        }
        let mut values = Vec::with_capacity(cols.len() - 1);
        for (&c, name) in cols[1..].iter().zip(&names[1..]) {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line, format!("column {name:?}: {cell:?} is not a number")))?;
            values.push(v);
        }
        let rows = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        rows.push(values);
    }
    if order.is_empty() {
        return Err(csv_err(2, "no data rows".into()));
    }

    let mut clusters = Vec::with_capacity(order.len());
    let mut g1_blocks = Vec::with_capacity(order.len());
    for id in &order {
        let rows = &groups[id];
        let m = rows.len();
        let at = |j: usize, k: usize| rows[j][k];
        let y = DVector::from_fn(m, |j, _| at(j, 0));
        let base = 1 + usize::from(has_offset);
        let xr = DMatrix::from_fn(m, nr + 1, |j, k| if k == 0 { 1.0 } else { at(j, base + k - 1) });
        let g1_block = DMatrix::from_fn(m, ng1, |j, k| at(j, base + nr + k));
        let xg1 = DVector::from_fn(ng1, |k, _| g1_block[(0, k)]);
        let xg2 = DMatrix::from_fn(m, ng2, |j, k| at(j, base + nr + ng1 + k));
        let mut c = ClusterData::new(y, xr, xg1, xg2);
        if has_offset {
            c = c.with_offset(DVector::from_fn(m, |j, _| at(j, 1)));
        }
        clusters.push(c);
        g1_blocks.push(g1_block);
    }
    let constant = constant_within_clusters(&g1_blocks);
    let varying: Vec<&str> = (0..ng1)
        .filter(|k| !constant.contains(k))
        .map(|k| config.subject_level[k].as_str())
        .collect();
    if !varying.is_empty() {
        let names = varying;
        return Err(Error::InvalidData(vec![format!(
            "subject-level column(s) vary within a cluster: {}",
            names.join(", ")
        )]));
    }
    let mut ds = Dataset::new(config.family, clusters)?;
    ds.fixed_names = std::iter::once("(Intercept)".to_string())
        .chain(config.random.iter().cloned())
        .chain(config.subject_level.iter().cloned())
        .chain(config.within_cluster.iter().cloned())
        .collect();
    ds.random_names = std::iter::once("(Intercept)".to_string()).chain(config.random.iter().cloned()).collect();
    ds.cluster_ids = order;
    validate_dataset(&ds)?;
    Ok(ds)
}

/// Writes `ds` in the layout described by [`ModelConfig::describing`].
pub fn emit_csv(ds: &Dataset, writer: impl Write) -> Result<()> {
    let config = ModelConfig::describing(ds);
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(config.columns()).map_err(to_io)?;
    for (id, c) in ds.cluster_ids.iter().zip(&ds.clusters) {
        for j in 0..c.len() {
            let mut rec = vec![id.clone(), fmt_num(c.y[j])];
            if config.offset.is_some() {
                rec.push(fmt_num(c.offset[j]));
            }
            rec.extend((1..ds.r).map(|k| fmt_num(c.xr[(j, k)])));
            rec.extend(c.xg1.iter().map(|&v| fmt_num(v)));
            rec.extend((0..ds.g2).map(|k| fmt_num(c.xg2[(j, k)])));
            w.write_record(&rec).map_err(to_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Parser)]
#[command(name = "glmmvb", version, about = "Variational Bayes for Poisson and logistic mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model to a CSV file.
    Fit(FitArgs),
    /// Draw replicate datasets from a simulation design.
    Simulate(SimulateArgs),
    /// Fit several models to the same data and rank them by lower bound.
    Select(SelectArgs),
}

/// Flags that override the model's `options` block.
#[derive(Debug, Clone, Default, Args)]
pub struct FitOverrides {
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub quad_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, fixed-order cluster loops.
    #[arg(long)]
    pub deterministic: bool,
}

impl FitOverrides {
    fn apply(&self, options: &mut FitOptions) {
        if let Some(t) = self.tol {
            options.tolerance = t;
        }
        if let Some(k) = self.max_iter {
            options.max_iterations = k;
        }
        if let Some(m) = self.quad_points {
            options.quad_points = m;
        }
        if let Some(s) = self.seed {
            options.seed = s;
        }
        if self.deterministic {
            options.deterministic = true;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub parametrization: Option<Parametrization>,
    #[command(flatten)]
    pub overrides: FitOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignName {
    PoissonIntercept,
    LogisticIntercept,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub design: DesignName,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON list of model configurations.
    #[arg(long)]
    pub models: PathBuf,
    #[command(flatten)]
    pub overrides: FitOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

/// Prior values actually used by a fit, as written to `result.json`.
#[derive(Debug, Clone, Serialize)]
pub struct PriorRecord {
    pub sigma_beta_scale: f64,
    pub nu: f64,
    pub s: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ResultRecord<'a> {
    schema_version: u32,
    label: Option<&'a str>,
    config_hash: String,
    seed: u64,
    data_fingerprint: &'a str,
    family: Family,
    parametrization: Parametrization,
    converged: bool,
    iterations: usize,
    elbo: f64,
    fixed: &'a [ParamSummary],
    random_sd: &'a [ParamSummary],
    d_mean: Vec<Vec<f64>>,
    d_sd: Vec<Vec<f64>>,
    prior: PriorRecord,
    options: FitOptions,
    n_clusters: usize,
    n_obs: usize,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn resolve(config: &mut ModelConfig, parametrization: Option<Parametrization>, overrides: &FitOverrides) -> Result<()> {
    if let Some(p) = parametrization {
        config.parametrization = p;
    }
    overrides.apply(&mut config.options);
    if let Some(k) = workers_from_env()? {
        config.options.workers = Some(k);
    }
    config.options.validate()
}

/// Data-driven start and prior, then the fit.
pub fn fit_config(ds: &Dataset, config: &ModelConfig) -> Result<(FitResult, PriorRecord)> {
    let start = crate::init::prepare(ds, &config.prior, config.parametrization)?;
    let prior = PriorRecord {
        sigma_beta_scale: config.prior.sigma_beta_scale,
        nu: start.prior.nu,
        s: rows(&start.prior.s),
    };
    let fit = crate::engine::fit(ds, &start.prior, config.parametrization, &config.options, start.state)?;
    Ok((fit, prior))
}

/// Writes `result.json` and `elbo_trace.csv` to `out`.
pub fn write_fit_outputs(out: &Path, config: &ModelConfig, ds: &Dataset, fit: &FitResult, prior: PriorRecord) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut options = config.options.clone();
    options.workers = None;
    let record = ResultRecord {
        schema_version: SCHEMA_VERSION,
        label: config.label.as_deref(),
        config_hash: config.hash(),
        seed: config.options.seed,
        data_fingerprint: &fit.data_fingerprint,
        family: ds.family,
        parametrization: fit.parametrization,
        converged: fit.converged,
        iterations: fit.iterations,
        elbo: fit.elbo(),
        fixed: &fit.summary.fixed,
        random_sd: &fit.summary.random_sd,
        d_mean: rows(&fit.summary.d_mean),
        d_sd: rows(&fit.summary.d_sd),
        prior,
        options,
        n_clusters: ds.n(),
        n_obs: ds.n_obs(),
    };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    fs::write(out.join("result.json"), json)?;
    let mut trace = String::from("iteration,elbo\n");
    for (k, e) in fit.elbo_trace.iter().enumerate() {
        trace.push_str(&format!("{},{}\n", k + 1, e));
    }
    fs::write(out.join("elbo_trace.csv"), trace)?;
    Ok(())
}

/// Human-readable summary of a fit.
pub fn summary_text(fit: &FitResult) -> String {
    let mut s = String::new();
    let width = fit
        .summary
        .fixed
        .iter()
        .chain(&fit.summary.random_sd)
        .map(|p| p.name.len())
        .max()
        .unwrap_or(9)
        .max(9);
    s.push_str(&format!("{:<width$}  {:>10}  {:>10}\n", "parameter", "mean", "sd"));
    for p in fit.summary.fixed.iter().chain(&fit.summary.random_sd) {
        s.push_str(&format!("{:<width$}  {:>10.4}  {:>10.4}\n", p.name, p.mean, p.sd));
    }
    s.push_str(&format!(
        "lower bound {:.4} after {} iterations ({}, {})\n",
        fit.elbo(),
        fit.iterations,
        if fit.converged { "converged" } else { "not converged" },
        fit.parametrization
    ));
    s
}

pub fn cmd_fit(args: &FitArgs) -> i32 {
    match try_fit(args) {
        Ok(true) => EXIT_CONVERGED,
        Ok(false) => EXIT_NOT_CONVERGED,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn try_fit(args: &FitArgs) -> Result<bool> {
    let mut config = ModelConfig::load(&args.model)?;
    resolve(&mut config, args.parametrization, &args.overrides)?;
    let ds = ingest_csv(&args.data, &config)?;
    let (fit, prior) = fit_config(&ds, &config)?;
    write_fit_outputs(&args.out, &config, &ds, &fit, prior)?;
    print!("{}", summary_text(&fit));
    if !fit.converged {
        warn!("no convergence within {} iterations", fit.iterations);
    }
    Ok(fit.converged)
}

#[derive(Debug, Serialize)]
struct ManifestRow {
    replicate: usize,
    file: String,
    seed: u64,
    stream: u64,
    rows: usize,
    sha256: String,
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    match try_simulate(args) {
        Ok(()) => EXIT_CONVERGED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn try_simulate(args: &SimulateArgs) -> Result<()> {
    let tag = match args.design {
        DesignName::PoissonIntercept => SimTag::PoissonIntercept,
        DesignName::LogisticIntercept => SimTag::LogisticIntercept,
    };
    let design = SimDesign::new(tag, args.replicates, args.seed);
    let data = simulate_design(&design)?;
    fs::create_dir_all(&args.out)?;
    let digits = args.replicates.max(1).to_string().len().max(3);
    let mut manifest = csv::Writer::from_writer(Vec::new());
    for (k, ds) in data.iter().enumerate() {
        let file = format!("replicate_{:0digits$}.csv", k + 1);
        let mut bytes = Vec::new();
        emit_csv(ds, &mut bytes)?;
        fs::write(args.out.join(&file), &bytes)?;
        manifest
            .serialize(ManifestRow {
                replicate: k + 1,
                file,
                seed: args.seed,
                stream: k as u64,
                rows: ds.n_obs(),
                sha256: hex(&Sha256::digest(&bytes)),
            })
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let manifest = manifest.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    fs::write(args.out.join("manifest.csv"), manifest)?;
    if let Some(first) = data.first() {
        let mut json = serde_json::to_string_pretty(&ModelConfig::describing(first))?;
        json.push('\n');
        fs::write(args.out.join("model.json"), json)?;
    }
    fs::write(args.out.join("design.json"), serde_json::to_string_pretty(&design.design())? + "\n")?;
    Ok(())
}

/// One row of the selection table; failed fits keep their error message.
#[derive(Debug, Clone)]
pub struct SelectionRow {
    pub label: String,
    pub outcome: std::result::Result<(f64, bool), String>,
    pub probability: Option<f64>,
}

/// Fits every model, tolerating individual failures.
pub fn run_selection(ds_path: &Path, configs: &[ModelConfig]) -> Result<Vec<SelectionRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    let mut fingerprint: Option<String> = None;
    for (k, config) in configs.iter().enumerate() {
        let label = config.label.clone().unwrap_or_else(|| format!("model{}", k + 1));
        let outcome = ingest_csv(ds_path, config).and_then(|ds| {
            let fp = ds.response_fingerprint();
            match &fingerprint {
                Some(f) if f != &fp => return Err(Error::DatasetMismatch(f.clone(), fp)),
                None => fingerprint = Some(fp),
                _ => {}
            }
            fit_config(&ds, config).map(|(f, _)| (f.elbo(), f.converged))
        });
        let outcome = outcome.map_err(|e| {
            warn!("{label}: {e}");
            e.to_string()
        });
        rows.push(SelectionRow {
            label,
            outcome,
            probability: None,
        });
    }
    let ok: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].outcome.is_ok()).collect();
    let elbos: Vec<f64> = ok.iter().map(|&i| rows[i].outcome.as_ref().unwrap().0).collect();
    for (&i, p) in ok.iter().zip(model_probabilities(&elbos)) {
        rows[i].probability = Some(p);
    }
    Ok(rows)
}

pub fn cmd_select(args: &SelectArgs) -> i32 {
    match try_select(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn try_select(args: &SelectArgs) -> Result<i32> {
    let mut configs: Vec<ModelConfig> = serde_json::from_str(&fs::read_to_string(&args.models)?)?;
    if configs.is_empty() {
        return Err(Error::Config("model list is empty".into()));
    }
    for c in &mut configs {
        resolve(c, None, &args.overrides)?;
    }
    let rows = run_selection(&args.data, &configs)?;
    fs::create_dir_all(&args.out)?;
    let mut table = String::from("model,elbo,converged,probability\n");
    for r in &rows {
        match &r.outcome {
            Ok((elbo, conv)) => table.push_str(&format!("{},{},{},{}\n", csv_field(&r.label), elbo, conv, r.probability.unwrap_or(f64::NAN))),
            Err(_) => table.push_str(&format!("{},,failed,\n", csv_field(&r.label))),
        }
    }
    fs::write(args.out.join("comparison.csv"), table)?;

    let comparison = ModelComparison {
        entries: rows
            .iter()
            .filter_map(|r| {
                r.outcome.as_ref().ok().map(|&(elbo, converged)| ModelEntry {
                    label: r.label.clone(),
                    elbo,
                    converged,
                    probability: r.probability.unwrap_or(0.0),
                })
            })
            .collect(),
    };
    if comparison.entries.is_empty() {
        for r in &rows {
            if let Err(e) = &r.outcome {
                eprintln!("{}: {e}", r.label);
            }
        }
        return Err(Error::Config("every model failed to fit".into()));
    }
    print!("{comparison}");
    for r in &rows {
        if let Err(e) = &r.outcome {
            eprintln!("{} failed: {e}", r.label);
        }
    }
    let all_good = rows.iter().all(|r| matches!(r.outcome, Ok((_, true))));
    Ok(if all_good { EXIT_CONVERGED } else { EXIT_NOT_CONVERGED })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Select(a) => cmd_select(a),
    }
}
