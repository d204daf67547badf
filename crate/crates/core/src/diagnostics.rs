//! Model checks: quantile plots with Monte Carlo bounds, the binned
//! spatial-correlation diagnostic, and kriging crossvalidation.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::GevParams;
use crate::gp::{Kriger, LatentFieldDraws};
use crate::linalg::CholeskyFactor;
use crate::mcem::{fit, FitConfig, FitResult};
use crate::model::{DataLayerParams, DownscalingFunction, JointDataset, ProcessLayerParams};
use crate::spatial::{Location, SourceTag};

/// Observed order statistics against their expected values under the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePlotData {
    pub site_id: String,
    /// `(observed, expected)`, sorted by observed.
    pub pairs: Vec<(f64, f64)>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
}

impl QuantilePlotData {
    /// Number of order statistics inside their bounds.
    pub fn inside_bounds(&self) -> usize {
        self.pairs
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|((x, _), (l, u))| *l <= x && x <= *u)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePlotOptions {
    /// Synthetic samples behind the bounds.
    pub n_g: usize,
    pub alpha: f64,
    /// Redraw the data-layer parameters from their sandwich normal for each
    /// synthetic sample.
    pub propagate_uncertainty: bool,
}

impl Default for QuantilePlotOptions {
    fn default() -> Self {
        Self {
            n_g: 1000,
            alpha: 0.05,
            propagate_uncertainty: false,
        }
    }
}

fn site_gev(theta1: &DataLayerParams, location: &Location, mu: f64) -> Result<GevParams> {
    theta1.gev_at(location, mu)
}

/// Mean over draws of the GEV quantile at `k / (n + 1)`, `k = 1..n`.
pub fn expected_order_quantiles(location: &Location, n: usize, mu_draws: &[f64], theta1: &DataLayerParams) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Domain(format!("quantile plot needs at least 2 observations, got {n}")));
    }
    if mu_draws.is_empty() {
        return Err(Error::Domain("no latent draws for the site".into()));
    }
    let gevs: Vec<GevParams> = mu_draws.iter().map(|m| site_gev(theta1, location, *m)).collect::<Result<_>>()?;
    (1..=n)
        .map(|k| {
            let p = k as f64 / (n as f64 + 1.0);
            let mut s = 0.0;
            for g in &gevs {
                s += g.quantile(p)?;
            }
            Ok(s / gevs.len() as f64)
        })
        .collect()
}

/// Bounds on each order statistic of a sample of size `n`: `n_g` synthetic
/// samples are drawn, cycling through the latent draws, and the bounds are
/// the order statistics at ranks `floor(n_g alpha/2)` and
/// `floor(n_g (1 - alpha/2))` (1-based) of each collected column.
///
/// With `theta1_cov` the data-layer parameters are redrawn per synthetic
/// sample from a normal about `theta1`.
#[allow(clippy::too_many_arguments)]
pub fn quantile_bounds<R: Rng + ?Sized>(
    location: &Location,
    n: usize,
    mu_draws: &[f64],
    theta1: &DataLayerParams,
    n_g: usize,
    alpha: f64,
    theta1_cov: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_g < 100 {
        return Err(Error::Domain(format!("N_G must be at least 100, got {n_g}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if n == 0 || mu_draws.is_empty() {
        return Err(Error::Domain("bounds need a sample size and latent draws".into()));
    }
    let lo_rank = (n_g as f64 * alpha / 2.0).floor() as usize;
    let hi_rank = (n_g as f64 * (1.0 - alpha / 2.0)).floor() as usize;
    if lo_rank < 1 {
        return Err(Error::Domain(format!("rank underflow: N_G * alpha / 2 = {} < 1", n_g as f64 * alpha / 2.0)));
    }
    let perturb = match theta1_cov {
        Some(c) => {
            let dim = theta1.to_vec().len();
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::Domain("data-layer covariance has the wrong dimension".into()));
            }
            Some(CholeskyFactor::new(c.clone())?)
        }
        None => None,
    };
    let sources = theta1.sources();
    let centre = theta1.to_vec();
    let mut columns = vec![Vec::with_capacity(n_g); n];
    let mut sample = vec![0.0; n];
    for g in 0..n_g {
        let mu = mu_draws[g % mu_draws.len()];
        let params = match &perturb {
            Some(f) => {
                let z = DVector::from_iterator(centre.len(), (0..centre.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let v: Vec<f64> = f.correlate(&z).iter().zip(&centre).map(|(a, b)| a + b).collect();
                DataLayerParams::from_vec(&sources, &v)?
            }
            None => *theta1,
        };
        let gev = site_gev(&params, location, mu)?;
        for x in sample.iter_mut() {
            *x = gev.sample_one(rng);
        }
        sample.sort_by(f64::total_cmp);
        for (col, x) in columns.iter_mut().zip(&sample) {
            col.push(*x);
        }
    }
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for mut col in columns {
        col.sort_by(f64::total_cmp);
        lower.push(col[lo_rank - 1]);
        upper.push(col[hi_rank - 1]);
    }
    Ok((lower, upper))
}

/// Quantile plot for one site from its latent draws.
#[allow(clippy::too_many_arguments)]
pub fn quantile_plot_from_draws<R: Rng + ?Sized>(
    site_id: &str,
    location: &Location,
    observed: &[f64],
    mu_draws: &[f64],
    theta1: &DataLayerParams,
    opts: &QuantilePlotOptions,
    theta1_cov: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<QuantilePlotData> {
    let mut obs = observed.to_vec();
    obs.sort_by(f64::total_cmp);
    let expected = expected_order_quantiles(location, obs.len(), mu_draws, theta1)?;
    let cov = if opts.propagate_uncertainty { theta1_cov } else { None };
    if opts.propagate_uncertainty && cov.is_none() {
        return Err(Error::Domain("uncertainty propagation needs the data-layer covariance".into()));
    }
    let (lower, upper) = quantile_bounds(location, obs.len(), mu_draws, theta1, opts.n_g, opts.alpha, cov, rng)?;
    Ok(QuantilePlotData {
        site_id: site_id.to_string(),
        pairs: obs.into_iter().zip(expected).collect(),
        lower,
        upper,
        alpha: opts.alpha,
    })
}

fn site_position(data: &JointDataset, draws: &LatentFieldDraws, site_id: &str) -> Result<usize> {
    let j = data
        .site_index(site_id)
        .ok_or_else(|| Error::Domain(format!("site {site_id} is not in the dataset")))?;
    let loc = data.records()[j].site.location;
    if draws.sites.get(j) != Some(&loc) {
        return Err(Error::Domain(format!("site {site_id} is absent from the latent draws")));
    }
    Ok(j)
}

/// Quantile plot for a site of the fitted dataset. `data` holds the values
/// as recorded; simulator values are passed through `g` first.
pub fn quantile_plot<R: Rng + ?Sized>(
    data: &JointDataset,
    fit: &FitResult,
    site_id: &str,
    g: &DownscalingFunction,
    opts: &QuantilePlotOptions,
    rng: &mut R,
) -> Result<QuantilePlotData> {
    let draws = fit.draws()?;
    let j = site_position(data, draws, site_id)?;
    let record = &data.records()[j];
    let loc = record.site.location;
    let observed: Vec<f64> = record.values().map(|x| g.apply_for(loc.source, x)).collect();
    let cov = fit.info.as_ref().map(|i| &i.sandwich_cov);
    quantile_plot_from_draws(site_id, &loc, &observed, &draws.column(j), &fit.theta1, opts, cov, rng)
}

/// Quantile plots for every site, in parallel with one stream per site
/// seeded from `rng`.
pub fn quantile_plots<R: Rng + ?Sized>(
    data: &JointDataset,
    fit: &FitResult,
    g: &DownscalingFunction,
    opts: &QuantilePlotOptions,
    rng: &mut R,
) -> Result<Vec<QuantilePlotData>> {
    let ids = data.site_ids();
    let seeds: Vec<u64> = ids.iter().map(|_| rng.next_u64()).collect();
    ids.par_iter()
        .zip(seeds)
        .map(|(id, seed)| quantile_plot(data, fit, id, g, opts, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect()
}

/// One site pair of the correlation diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub site_a: String,
    pub site_b: String,
    pub distance_km: f64,
    pub model_corr: f64,
    pub empirical_corr: f64,
    pub n_years: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBin {
    pub model_corr: f64,
    pub empirical_corr: f64,
    pub pair_count: usize,
    pub model_min: f64,
    pub model_max: f64,
    /// Standard deviation of the pair correlations within the bin.
    pub empirical_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDiagnostic {
    pub k: f64,
    pub bins: Vec<CorrelationBin>,
    pub pairs: Vec<PairCorrelation>,
    /// Pairs with fewer than three common years or a constant series.
    pub pairs_excluded: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Model-implied correlation of two sites' maxima with the GEV noise
/// variance scaled by `k`.
pub fn model_correlation(
    a: &Location,
    b: &Location,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    k: f64,
) -> Result<f64> {
    let cov = &theta2.cov;
    let s2 = cov.sigma2();
    if s2 == 0.0 {
        return Ok(0.0);
    }
    let noise = |l: &Location| -> Result<f64> {
        let g = site_gev(theta1, l, 0.0)?;
        g.variance()
            .ok_or_else(|| Error::Domain(format!("GEV variance is infinite for xi = {}", g.xi())))
    };
    let nugget = cov.tau() * cov.tau() / s2;
    let da = 1.0 + nugget + k * noise(a)? / s2;
    let db = 1.0 + nugget + k * noise(b)? / s2;
    Ok(cov.decay(a.distance_km(b)) / (da * db).sqrt())
}

/// Empirical against model correlations for every pair of sites, binned on
/// the model value into `n_bins` equal-count bins.
pub fn spatial_correlation_check_with(
    data: &JointDataset,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    g: &DownscalingFunction,
    k: f64,
    n_bins: usize,
) -> Result<CorrelationDiagnostic> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::Domain(format!("k must be non-negative, got {k}")));
    }
    if n_bins == 0 {
        return Err(Error::Domain("need at least one bin".into()));
    }
    let series: Vec<HashMap<i32, f64>> = data
        .records()
        .iter()
        .map(|r| {
            let src = r.site.location.source;
            r.maxima.iter().map(|m| (m.year, g.apply_for(src, m.value))).collect()
        })
        .collect();
    let recs = data.records();
    let d = recs.len();
    let index: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let results: Vec<Result<Option<PairCorrelation>>> = index
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&recs[i], &recs[j]);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for m in &a.maxima {
                if let Some(y) = series[j].get(&m.year) {
                    xs.push(series[i][&m.year]);
                    ys.push(*y);
                }
            }
            if xs.len() < 3 {
                return Ok(None);
            }
            let r = pearson(&xs, &ys);
            if !r.is_finite() {
                return Ok(None);
            }
            Ok(Some(PairCorrelation {
                site_a: a.site.id.clone(),
                site_b: b.site.id.clone(),
                distance_km: a.site.location.distance_km(&b.site.location),
                model_corr: model_correlation(&a.site.location, &b.site.location, theta1, theta2, k)?,
                empirical_corr: r,
                n_years: xs.len(),
            }))
        })
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(p) => pairs.push(p),
            None => excluded += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset("no site pair shares three or more years".into()));
    }
    pairs.sort_by(|a, b| a.model_corr.total_cmp(&b.model_corr));
    let n_bins = n_bins.min(pairs.len());
    let bins = (0..n_bins)
        .map(|b| {
            let lo = b * pairs.len() / n_bins;
            let hi = (b + 1) * pairs.len() / n_bins;
            let chunk = &pairs[lo..hi];
            let n = chunk.len() as f64;
            let em = chunk.iter().map(|p| p.empirical_corr).sum::<f64>() / n;
            let var = if chunk.len() > 1 {
                chunk.iter().map(|p| (p.empirical_corr - em).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CorrelationBin {
                model_corr: chunk.iter().map(|p| p.model_corr).sum::<f64>() / n,
                empirical_corr: em,
                pair_count: chunk.len(),
                model_min: chunk[0].model_corr,
                model_max: chunk[chunk.len() - 1].model_corr,
                empirical_sd: var.sqrt(),
            }
        })
        .collect();
    Ok(CorrelationDiagnostic {
        k,
        bins,
        pairs,
        pairs_excluded: excluded,
    })
}

/// [`spatial_correlation_check_with`] at the fitted parameters.
pub fn spatial_correlation_check(
    data: &JointDataset,
    fit: &FitResult,
    g: &DownscalingFunction,
    k: f64,
    n_bins: usize,
) -> Result<CorrelationDiagnostic> {
    spatial_correlation_check_with(data, &fit.theta1, &fit.theta2, g, k, n_bins)
}

/// Prediction at one held-out site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPrediction {
    pub site_id: String,
    pub plot: QuantilePlotData,
    /// Kriged location draws, one per final latent draw.
    pub mu_draws: Vec<f64>,
    /// Central predictive interval of the GEV mixture.
    pub interval: (f64, f64),
    pub n_observations: usize,
    pub n_covered: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub holdouts: Vec<HoldoutPrediction>,
    pub fit: FitResult,
    pub level: f64,
}

impl CrossValidation {
    /// Proportion of held-out observations inside their predictive interval.
    pub fn coverage(&self) -> f64 {
        let n: usize = self.holdouts.iter().map(|h| h.n_observations).sum();
        let c: usize = self.holdouts.iter().map(|h| h.n_covered).sum();
        c as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationOptions {
    pub plot: QuantilePlotOptions,
    /// Level of the predictive intervals.
    pub level: f64,
}

impl Default for CrossValidationOptions {
    fn default() -> Self {
        Self {
            plot: QuantilePlotOptions::default(),
            level: 0.95,
        }
    }
}

/// Quantile of the equal-weight mixture of `gevs`, by bisection.
pub fn mixture_quantile(gevs: &[GevParams], p: f64) -> Result<f64> {
    if gevs.is_empty() || !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain("mixture quantile needs components and p in (0, 1)".into()));
    }
    let qs: Vec<f64> = gevs.iter().map(|g| g.quantile(p)).collect::<Result<_>>()?;
    let mut lo = qs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cdf = |x: f64| gevs.iter().map(|g| g.cdf(x)).sum::<f64>() / gevs.len() as f64;
    for _ in 0..200 {
        if hi - lo <= 1e-12 * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Kriged location draws at `target`: for each latent draw, the conditional
/// mean plus a normal draw with the conditional variance.
pub fn kriged_mu_draws<R: Rng + ?Sized>(
    kriger: &Kriger,
    draws: &LatentFieldDraws,
    target: &Location,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let w = kriger.weights(target)?;
    let sd = w.cond_var.sqrt();
    Ok(draws
        .rows()
        .map(|row| {
            let z: f64 = rng.sample(StandardNormal);
            w.cond_mean(row, kriger.site_means()) + sd * z
        })
        .collect())
}

/// Refits without the held-out field sites and predicts their maxima by
/// kriging the latent field from each final draw.
pub fn crossvalidate<R: Rng + ?Sized>(
    data: &JointDataset,
    holdout: &[String],
    cfg: &FitConfig,
    opts: &CrossValidationOptions,
    rng: &mut R,
) -> Result<CrossValidation> {
    if holdout.is_empty() {
        return Err(Error::Domain("holdout set is empty".into()));
    }
    let unknown: Vec<&str> = holdout.iter().filter(|h| data.site_index(h).is_none()).map(|s| s.as_str()).collect();
    if !unknown.is_empty() {
        return Err(Error::Domain(format!("unknown holdout sites: {}", unknown.join(", "))));
    }
    let not_field: Vec<&str> = holdout
        .iter()
        .filter(|h| data.records()[data.site_index(h).unwrap()].site.location.source != SourceTag::Field)
        .map(|s| s.as_str())
        .collect();
    if !not_field.is_empty() {
        return Err(Error::Domain(format!("holdout sites must be field sites: {}", not_field.join(", "))));
    }
    let retained_field = data
        .records()
        .iter()
        .filter(|r| r.site.location.source == SourceTag::Field && !holdout.contains(&r.site.id))
        .count();
    if retained_field == 0 {
        return Err(Error::Domain("holdout must leave at least one field site".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Domain(format!("interval level must lie in (0, 1), got {}", opts.level)));
    }
    let train = data.without(holdout)?;
    let fitted = fit(&train, cfg, rng)?;
    let draws = fitted.draws()?;
    let kriger = Kriger::new(&fitted.theta2.mean, &fitted.theta2.cov, &draws.sites)?;
    let mut holdouts = Vec::with_capacity(holdout.len());
    let tail = (1.0 - opts.level) / 2.0;
    for id in holdout {
        let record = &data.records()[data.site_index(id).unwrap()];
        let loc = record.site.location;
        let mu_draws = kriged_mu_draws(&kriger, draws, &loc, rng)?;
        let observed: Vec<f64> = record.values().collect();
        let plot = quantile_plot_from_draws(id, &loc, &observed, &mu_draws, &fitted.theta1, &opts.plot, fitted.info.as_ref().map(|i| &i.sandwich_cov), rng)?;
        let gevs: Vec<GevParams> = mu_draws.iter().map(|m| site_gev(&fitted.theta1, &loc, *m)).collect::<Result<_>>()?;
        let interval = (mixture_quantile(&gevs, tail)?, mixture_quantile(&gevs, 1.0 - tail)?);
        let n_covered = observed.iter().filter(|x| interval.0 <= **x && **x <= interval.1).count();
        holdouts.push(HoldoutPrediction {
            site_id: id.clone(),
            plot,
            mu_draws,
            interval,
            n_observations: observed.len(),
            n_covered,
        });
    }
    Ok(CrossValidation {
        holdouts,
        fit: fitted,
        level: opts.level,
    })
}

fn comment_line<W: Write>(w: &mut W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

pub const QUANTILE_PLOT_HEADER: [&str; 6] = ["site_id", "rank", "observed", "expected", "lower", "upper"];

pub fn write_quantile_plots_csv<W: Write>(plots: &[QuantilePlotData], mut w: W, comment: Option<&str>) -> Result<()> {
    comment_line(&mut w, comment)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(QUANTILE_PLOT_HEADER)?;
    for p in plots {
        for (k, ((x, e), (l, u))) in p.pairs.iter().zip(p.lower.iter().zip(&p.upper)).enumerate() {
            out.write_record([p.site_id.clone(), (k + 1).to_string(), x.to_string(), e.to_string(), l.to_string(), u.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub const CORRELATION_HEADER: [&str; 8] = [
    "k",
    "bin",
    "model_corr",
    "empirical_corr",
    "pair_count",
    "model_min",
    "model_max",
    "empirical_sd",
];

pub fn write_correlation_csv<W: Write>(diagnostics: &[CorrelationDiagnostic], mut w: W, comment: Option<&str>) -> Result<()> {
    comment_line(&mut w, comment)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CORRELATION_HEADER)?;
    for d in diagnostics {
        for (b, bin) in d.bins.iter().enumerate() {
            out.write_record([
                d.k.to_string(),
                (b + 1).to_string(),
                bin.model_corr.to_string(),
                bin.empirical_corr.to_string(),
                bin.pair_count.to_string(),
                bin.model_min.to_string(),
                bin.model_max.to_string(),
                bin.empirical_sd.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub const HOLDOUT_HEADER: [&str; 6] = ["site_id", "lower", "upper", "n_observations", "n_covered", "coverage"];

pub fn write_holdout_csv<W: Write>(cv: &CrossValidation, mut w: W, comment: Option<&str>) -> Result<()> {
    comment_line(&mut w, comment)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HOLDOUT_HEADER)?;
    for h in &cv.holdouts {
        out.write_record([
            h.site_id.clone(),
            h.interval.0.to_string(),
            h.interval.1.to_string(),
            h.n_observations.to_string(),
            h.n_covered.to_string(),
            (h.n_covered as f64 / h.n_observations as f64).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
