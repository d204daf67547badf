//! Command-line front end: extract, fit, diagnose, map and simulate.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    crossvalidate, quantile_plot, quantile_plots, spatial_correlation_check, write_correlation_csv, write_holdout_csv,
    write_quantile_plots_csv, CrossValidationOptions, QuantilePlotOptions,
};
use crate::error::{Error, Result};
use crate::gp::LatentFieldDraws;
use crate::ingest::{load_dataset, read_table_file, write_daily_csv, write_maxima_csv, IngestConfig, InputTable};
use crate::map::{grid_locations, return_level_map, write_map_csv, ElevationRaster, GridSpec, MapOptions};
use crate::mcem::{fit, FitConfig, FitResult, TraceRow};
use crate::model::{apply_downscaling, DataLayerParams, DownscalingFunction, JointDataset, ProcessLayerParams, Site};
use crate::sampler::SamplerConfig;
use crate::spatial::{centroid, Location, SourceTag};
use crate::synthetic::{daily_from_maxima, random_sites, simulate_misspecified, simulate_world, WorldParams};
use crate::uncertainty::{theta2_standard_errors, InfoMatrices, ScoreClustering};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Marker printed in place of a standard error for a fixed parameter.
pub const FIXED_MARKER: &str = "N/A";

#[derive(Debug, Parser)]
#[command(name = "latent-extremes", version, about = "Latent Gaussian spatial extreme-value models for rainfall maxima")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract annual maxima from daily series.
    Extract(ExtractArgs),
    /// Fit the model by Monte Carlo EM.
    Fit(FitArgs),
    /// Quantile plots, the spatial-correlation check or crossvalidation.
    Diagnose(DiagnoseArgs),
    /// Gridded return-level map with interval widths.
    Map(MapArgs),
    /// Simulate a synthetic dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    /// Daily (or maxima) CSV inputs; sources are read from the `source` column.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ingestion report CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub max_missing_days: u32,
    /// Fail on sites left without any year instead of dropping them.
    #[arg(long)]
    pub keep_empty_sites: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Field data (daily or maxima CSV).
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Simulator data (daily or maxima CSV).
    #[arg(long)]
    pub simulator: Option<PathBuf>,
    /// TOML config with sections data, model, sampler, optimizer.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub draws_per_site: Option<usize>,
    #[arg(long)]
    pub growth_percent: Option<u32>,
    #[arg(long)]
    pub final_draws: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub warm_burn_in: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_free: bool,
    #[arg(long, value_enum)]
    pub clustering: Option<Clustering>,
    /// Fit result JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Parameter table text file.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Clustering {
    Observation,
    Year,
}

impl From<Clustering> for ScoreClustering {
    fn from(c: Clustering) -> Self {
        match c {
            Clustering::Observation => ScoreClustering::Observation,
            Clustering::Year => ScoreClustering::Year,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DiagnosticKind {
    Qq,
    Spatial,
    Crossval,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum)]
    pub kind: DiagnosticKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Scaling of the GEV noise variance; repeat for several curves.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = vec![0.0, 1.0])]
    pub k: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub n_bins: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_g: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Redraw data-layer parameters from their sandwich normal in the bounds.
    #[arg(long)]
    pub propagate: bool,
    /// Sites for quantile plots (default all).
    #[arg(long, value_delimiter = ',')]
    pub sites: Vec<String>,
    /// Held-out field sites for crossvalidation.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<String>,
    /// Per-holdout predictive-interval summary CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct MapArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// `lon1,lat1,lon2,lat2`.
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: String,
    #[arg(long)]
    pub cell_km: f64,
    /// CSV with columns lon, lat, elevation_m.
    #[arg(long)]
    pub elevation: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    pub p_years: f64,
    #[arg(long, default_value_t = 500)]
    pub n_uncertainty_draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON with `theta1` and `theta2`; defaults to the built-in reference world.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// CSV with columns source, site_id, lon, lat, elevation_m.
    #[arg(long, conflicts_with = "random_sites")]
    pub sites: Option<PathBuf>,
    /// Random layout as `n_field,n_simulator`.
    #[arg(long, value_delimiter = ',')]
    pub random_sites: Vec<usize>,
    #[arg(long, default_value_t = 150.0)]
    pub extent_km: f64,
    #[arg(long)]
    pub years: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Couple maxima within a year with this residual correlation range (km).
    #[arg(long)]
    pub misspecify_range: Option<f64>,
    /// Write daily series instead of annual maxima.
    #[arg(long)]
    pub daily: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolved fitting configuration; the TOML file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub optimizer: OptimizerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            sampler: SamplerSection::default(),
            optimizer: OptimizerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulator: Option<PathBuf>,
    pub max_missing_days: u32,
    pub drop_empty_sites: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let i = IngestConfig::default();
        Self {
            field: None,
            simulator: None,
            max_missing_days: i.max_missing_days,
            drop_empty_sites: i.drop_empty_sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub tau: f64,
    pub tau_free: bool,
    pub clamp_field: bool,
    pub clustering: ScoreClustering,
    pub downscaling: DownscalingFunction,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            tau: f.tau,
            tau_free: f.tau_free,
            clamp_field: f.clamp_field,
            clustering: f.score_clustering,
            downscaling: DownscalingFunction::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub burn_in: usize,
    pub warm_burn_in: usize,
    pub warm_start: bool,
    pub thin: usize,
    pub adapt: bool,
    pub target_accept: f64,
    pub adapt_batch: usize,
    pub n_chains: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let f = FitConfig::default();
        Self {
            burn_in: s.burn_in,
            warm_burn_in: f.warm_burn_in,
            warm_start: f.warm_start,
            thin: s.thin,
            adapt: s.adapt,
            target_accept: s.target_accept,
            adapt_batch: s.adapt_batch,
            n_chains: s.n_chains,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub iterations: usize,
    pub draws_per_site: usize,
    pub growth_percent: u32,
    pub restarts: usize,
    pub newton_max_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_draws: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_rel_change: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            iterations: f.iterations,
            draws_per_site: f.draws_per_site,
            growth_percent: f.growth_percent,
            restarts: f.restarts,
            newton_max_iters: f.newton_max_iters,
            final_draws: f.final_draws,
            stop_rel_change: f.stop_rel_change,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Leading hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(short_hash(self.to_toml()?.as_bytes()))
    }

    pub fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            max_missing_days: self.data.max_missing_days,
            drop_empty_sites: self.data.drop_empty_sites,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        let s = &self.sampler;
        let o = &self.optimizer;
        let m = &self.model;
        FitConfig {
            iterations: o.iterations,
            draws_per_site: o.draws_per_site,
            growth_percent: o.growth_percent,
            sampler: SamplerConfig {
                burn_in: s.burn_in,
                thin: s.thin,
                adapt: s.adapt,
                target_accept: s.target_accept,
                adapt_batch: s.adapt_batch,
                n_chains: s.n_chains,
                ..SamplerConfig::default()
            },
            warm_start: s.warm_start,
            warm_burn_in: s.warm_burn_in,
            final_draws: o.final_draws,
            tau: m.tau,
            tau_free: m.tau_free,
            restarts: o.restarts,
            newton_max_iters: o.newton_max_iters,
            stop_rel_change: o.stop_rel_change,
            clamp_field: m.clamp_field,
            compute_uncertainty: true,
            score_clustering: m.clustering,
            theta1_start: None,
            theta2_start: None,
        }
    }

    fn apply_flags(&mut self, a: &FitArgs) {
        if let Some(p) = &a.field {
            self.data.field = Some(p.clone());
        }
        if let Some(p) = &a.simulator {
            self.data.simulator = Some(p.clone());
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = a.iterations {
            self.optimizer.iterations = v;
        }
        if let Some(v) = a.draws_per_site {
            self.optimizer.draws_per_site = v;
        }
        if let Some(v) = a.growth_percent {
            self.optimizer.growth_percent = v;
        }
        if let Some(v) = a.final_draws {
            self.optimizer.final_draws = Some(v);
        }
        if let Some(v) = a.burn_in {
            self.sampler.burn_in = v;
        }
        if let Some(v) = a.warm_burn_in {
            self.sampler.warm_burn_in = v;
        }
        if let Some(v) = a.tau {
            self.model.tau = v;
        }
        if a.tau_free {
            self.model.tau_free = true;
        }
        if let Some(c) = a.clustering {
            self.model.clustering = c.into();
        }
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn args_hash<T: Serialize>(args: &T) -> Result<String> {
    Ok(short_hash(serde_json::to_string(args)?.as_bytes()))
}

pub fn comment(hash: &str) -> String {
    format!("latent-extremes {VERSION} config={hash}")
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub estimate: f64,
    /// `None` for a fixed parameter or when the information matrix failed.
    pub se: Option<f64>,
    pub fixed: bool,
}

/// Everything later commands need from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub dataset: JointDataset,
    pub theta1: DataLayerParams,
    pub theta2: ProcessLayerParams,
    pub parameters: Vec<ParameterRow>,
    pub info: Option<InfoMatrices>,
    pub info_error: Option<String>,
    pub final_draws: LatentFieldDraws,
}

impl FitFile {
    pub fn read(path: &Path) -> Result<Self> {
        let f: FitFile = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        let records = f.dataset.records().to_vec();
        let dataset = JointDataset::with_origin(records, f.dataset.origin())?;
        if f.final_draws.n_sites() != dataset.n_sites() {
            return Err(Error::Dataset("fit file draws do not match its dataset".into()));
        }
        Ok(FitFile { dataset, ..f })
    }

    pub fn fit_result(&self) -> FitResult {
        FitResult {
            theta1: self.theta1,
            theta2: self.theta2.clone(),
            trace: Vec::new(),
            final_draws: Some(self.final_draws.clone()),
            info: self.info.clone(),
            info_error: self.info_error.clone(),
        }
    }
}

/// Estimates with sandwich standard errors for the data layer and Fisher
/// standard errors for the process layer.
pub fn parameter_rows(result: &FitResult) -> Vec<ParameterRow> {
    let mut rows = Vec::new();
    let se1 = result.info.as_ref().map(|i| i.sandwich_se());
    for (k, (name, value)) in result.theta1.names().into_iter().zip(result.theta1.to_vec()).enumerate() {
        rows.push(ParameterRow {
            name,
            estimate: value,
            se: se1.as_ref().map(|s| s[k]),
            fixed: false,
        });
    }
    let t2 = &result.theta2;
    let mut estimates: Vec<f64> = t2.mean.coefficients().to_vec();
    estimates.extend([t2.cov.sigma2().sqrt(), t2.cov.phi(), t2.cov.delta(), t2.cov.tau()]);
    let ses: Vec<(String, Option<f64>)> = match &result.info {
        Some(i) => theta2_standard_errors(t2, &i.fisher_cov_theta2),
        None => theta2_standard_errors(t2, &DMatrix::zeros(0, 0)),
    };
    for ((name, se), estimate) in ses.into_iter().zip(estimates) {
        let fixed = name == "tau" && t2.tau_fixed;
        rows.push(ParameterRow {
            name,
            estimate,
            se,
            fixed,
        });
    }
    rows
}

/// Two-column estimate and standard-error layout.
pub fn format_table(rows: &[ParameterRow]) -> String {
    let mut s = format!("{:<12} {:>14} {:>14}\n", "parameter", "estimate", "s.e.");
    for r in rows {
        let se = match (r.fixed, r.se) {
            (true, _) => FIXED_MARKER.to_string(),
            (false, Some(v)) => format!("{v:.6}"),
            (false, None) => "-".to_string(),
        };
        s.push_str(&format!("{:<12} {:>14.6} {:>14}\n", r.name, r.estimate, se));
    }
    s
}

pub const TRACE_HEADER: [&str; 4] = ["iteration", "n_draws", "parameter", "value"];

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for row in trace {
        let extra = [
            ("objective_before".to_string(), row.objective_before),
            ("objective_after".to_string(), row.objective_after),
            ("min_acceptance".to_string(), row.min_acceptance),
            ("max_acceptance".to_string(), row.max_acceptance),
        ];
        for (name, value) in row.parameters.iter().chain(extra.iter()) {
            out.write_record([row.iteration.to_string(), row.n_draws.to_string(), name.clone(), value.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Map(a) => cmd_map(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let cfg = IngestConfig {
        max_missing_days: a.max_missing_days,
        drop_empty_sites: !a.keep_empty_sites,
    };
    let tables: Vec<InputTable> = a.inputs.iter().map(|p| read_table_file(p)).collect::<Result<_>>()?;
    let (dataset, report) = crate::ingest::dataset_from_tables(tables, &cfg)?;
    let c = comment(&args_hash(a)?);
    write_maxima_csv(&dataset, create(&a.out)?, Some(&c))?;
    if let Some(p) = &a.report {
        report.write_csv(create(p)?)?;
    }
    eprintln!(
        "extracted {} sites, {} maxima; {} site-years dropped, {} sites dropped",
        dataset.n_sites(),
        dataset.n_observations(),
        report.years_dropped(),
        report.sites_dropped.len()
    );
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply_flags(a);
    let field = cfg
        .data
        .field
        .clone()
        .ok_or_else(|| Error::Config("no field data given (--field or data.field)".into()))?;
    let (raw, report) = load_dataset(&field, cfg.data.simulator.as_deref(), &cfg.ingest_config())?;
    if !report.sites_dropped.is_empty() {
        eprintln!("dropped sites without retained years: {}", report.sites_dropped.join(", "));
    }
    let data = apply_downscaling(&cfg.model.downscaling, &raw)?;
    let hash = cfg.hash()?;
    let c = comment(&hash);
    let fit_cfg = cfg.fit_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let result = match fit(&data, &fit_cfg, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            if let (Error::FitAborted { trace, .. }, Some(p)) = (&e, &a.trace) {
                write_trace_csv(trace, create(p)?, Some(&c))?;
            }
            return Err(e);
        }
    };
    if let Some(p) = &a.trace {
        write_trace_csv(&result.trace, create(p)?, Some(&c))?;
    }
    if let Some(e) = &result.info_error {
        eprintln!("warning: standard errors unavailable: {e}");
    }
    let rows = parameter_rows(&result);
    let table = format_table(&rows);
    if let Some(p) = &a.table {
        let mut w = create(p)?;
        writeln!(w, "# {c}")?;
        w.write_all(table.as_bytes())?;
    }
    print!("{table}");
    let file = FitFile {
        version: VERSION.to_string(),
        config_hash: hash,
        config: cfg,
        dataset: raw,
        theta1: result.theta1,
        theta2: result.theta2.clone(),
        parameters: rows,
        info: result.info.clone(),
        info_error: result.info_error.clone(),
        final_draws: result.draws()?.clone(),
    };
    let mut w = create(&a.out)?;
    serde_json::to_writer(&mut w, &file)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let file = FitFile::read(&a.fit)?;
    let result = file.fit_result();
    let g = file.config.model.downscaling;
    let c = comment(&args_hash(&(a, &file.config_hash))?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let unknown = |ids: &[String]| -> Result<()> {
        let bad: Vec<&str> = ids
            .iter()
            .filter(|s| file.dataset.site_index(s).is_none())
            .map(|s| s.as_str())
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(format!("unknown site ids: {}", bad.join(", "))))
        }
    };
    let plot_opts = QuantilePlotOptions {
        n_g: a.n_g,
        alpha: a.alpha,
        propagate_uncertainty: a.propagate,
    };
    match a.kind {
        DiagnosticKind::Qq => {
            unknown(&a.sites)?;
            let plots = if a.sites.is_empty() {
                quantile_plots(&file.dataset, &result, &g, &plot_opts, &mut rng)?
            } else {
                a.sites
                    .iter()
                    .map(|id| quantile_plot(&file.dataset, &result, id, &g, &plot_opts, &mut rng))
                    .collect::<Result<_>>()?
            };
            write_quantile_plots_csv(&plots, create(&a.out)?, Some(&c))?;
        }
        DiagnosticKind::Spatial => {
            let diags = a
                .k
                .iter()
                .map(|k| spatial_correlation_check(&file.dataset, &result, &g, *k, a.n_bins))
                .collect::<Result<Vec<_>>>()?;
            for d in &diags {
                if d.pairs_excluded > 0 {
                    eprintln!("k={}: {} pairs with fewer than 3 common years excluded", d.k, d.pairs_excluded);
                }
            }
            write_correlation_csv(&diags, create(&a.out)?, Some(&c))?;
        }
        DiagnosticKind::Crossval => {
            if a.holdout.is_empty() {
                return Err(Error::Domain("--holdout needs at least one site".into()));
            }
            unknown(&a.holdout)?;
            let data = apply_downscaling(&g, &file.dataset)?;
            let opts = CrossValidationOptions {
                plot: plot_opts,
                level: 0.95,
            };
            let cv = crossvalidate(&data, &a.holdout, &file.config.fit_config(), &opts, &mut rng)?;
            let plots: Vec<_> = cv.holdouts.iter().map(|h| h.plot.clone()).collect();
            write_quantile_plots_csv(&plots, create(&a.out)?, Some(&c))?;
            if let Some(p) = &a.summary {
                write_holdout_csv(&cv, create(p)?, Some(&c))?;
            }
            eprintln!("held-out coverage of 95% predictive intervals: {:.3}", cv.coverage());
        }
    }
    Ok(())
}

pub fn cmd_map(a: &MapArgs) -> Result<()> {
    let file = FitFile::read(&a.fit)?;
    let grid = GridSpec::from_bbox(&a.bbox, a.cell_km)?;
    let raster = ElevationRaster::read_file(&a.elevation)?;
    let targets = grid_locations(&grid, &raster, file.dataset.origin())?;
    let opts = MapOptions {
        p_years: a.p_years,
        n_uncertainty_draws: a.n_uncertainty_draws,
        level: 0.95,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let map = return_level_map(&file.fit_result(), &targets, &opts, &mut rng)?;
    for w in &map.warnings {
        eprintln!("warning: {w}");
    }
    let c = comment(&args_hash(&(a, &file.config_hash))?);
    write_map_csv(&map, create(&a.out)?, Some(&c))
}

pub const SITES_HEADER: [&str; 5] = ["source", "site_id", "lon", "lat", "elevation_m"];

/// Reads a site list with columns source, site_id, lon, lat, elevation_m.
pub fn read_sites(path: &Path) -> Result<Vec<Site>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != SITES_HEADER {
        return Err(Error::Schema {
            line: 1,
            message: format!("expected header {}", SITES_HEADER.join(",")),
        });
    }
    let mut raw = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |m: &str| Error::Schema {
            line,
            message: m.to_string(),
        };
        let source: SourceTag = rec.get(0).unwrap_or("").parse().map_err(|_| bad("bad source"))?;
        let id = rec.get(1).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(bad("empty site_id"));
        }
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(&format!("column {} is not a finite number", SITES_HEADER[k])))
        };
        raw.push((id, num(2)?, num(3)?, num(4)?, source));
    }
    if raw.is_empty() {
        return Err(Error::Schema {
            line: 1,
            message: "no sites".into(),
        });
    }
    let origin = centroid(raw.iter().map(|r| (r.1, r.2)));
    raw.into_iter()
        .map(|(id, lon, lat, e, s)| {
            Ok(Site {
                id,
                location: Location::geographic(lon, lat, e, s, origin)?,
            })
        })
        .collect()
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sites = match (&a.sites, a.random_sites.as_slice()) {
        (Some(p), _) => read_sites(p)?,
        (None, [f, m]) => random_sites(*f, *m, a.extent_km, &mut rng)?,
        _ => return Err(Error::Domain("give --sites or --random-sites n_field,n_simulator".into())),
    };
    let world = match &a.theta {
        Some(p) => serde_json::from_reader::<_, WorldParams>(std::io::BufReader::new(File::open(p)?))?,
        None => WorldParams::reference(),
    }
    .for_sites(&sites)?;
    let data = match a.misspecify_range {
        Some(r) => simulate_misspecified(&world.theta1, &world.theta2, &sites, a.years, r, &mut rng)?,
        None => simulate_world(&world.theta1, &world.theta2, &sites, a.years, &mut rng)?,
    };
    let c = comment(&args_hash(a)?);
    let w = create(&a.out)?;
    if a.daily {
        let series = daily_from_maxima(&data, &mut rng)?;
        write_daily_csv(&series, w, Some(&c))
    } else {
        write_maxima_csv(&data, w, Some(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap().len(), 12);
    }

    #[test]
    fn flags_override_config_file() {
        let mut c = RunConfig::from_toml("seed = 5\n[optimizer]\niterations = 7\ndraws_per_site = 3\n").unwrap();
        assert_eq!(c.optimizer.iterations, 7);
        let cli = Cli::try_parse_from(["latent-extremes", "fit", "--out", "x.json", "--iterations", "1"]).unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        c.apply_flags(&a);
        assert_eq!(c.optimizer.iterations, 1);
        assert_eq!(c.optimizer.draws_per_site, 3);
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(RunConfig::from_toml("[optimizer]\niteratons = 3\n").is_err());
    }

    #[test]
    fn fixed_tau_prints_marker() {
        let rows = vec![
            ParameterRow {
                name: "phi".into(),
                estimate: 40.0,
                se: Some(3.0),
                fixed: false,
            },
            ParameterRow {
                name: "tau".into(),
                estimate: 0.0,
                se: None,
                fixed: true,
            },
        ];
        let t = format_table(&rows);
        assert!(t.lines().last().unwrap().trim_end().ends_with(FIXED_MARKER));
        assert!(t.contains("3.000000"));
    }

    #[test]
    fn diagnose_defaults_to_both_k() {
        let cli = Cli::try_parse_from(["latent-extremes", "diagnose", "--fit", "f.json", "--kind", "spatial", "--out", "o.csv"]).unwrap();
        let Command::Diagnose(a) = cli.command else { panic!() };
        assert_eq!(a.k, vec![0.0, 1.0]);
    }

    #[test]
    fn bad_arguments_exit_with_input_error() {
        assert_eq!(run(["latent-extremes", "fit"]), 2);
        assert_eq!(run(["latent-extremes", "--version"]), 0);
    }
}
