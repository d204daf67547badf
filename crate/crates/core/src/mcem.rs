//! Monte Carlo EM for the joint model: the E-step samples the latent
//! location field, the M-step maximizes the Monte Carlo expected complete
//! log-likelihood separately in the data-layer and process-layer parameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::standard_terms;
use crate::gp::LatentFieldDraws;
use crate::linalg::CholeskyFactor;
use crate::model::{DataLayerParams, JointDataset, MeanStructure, ProcessLayerParams, SourceParams};
use crate::optim::{minimize, SimplexOptions};
use crate::sampler::{sample_latent_field_from, ChainStart, SamplerConfig};
use crate::spatial::{covariance_matrix, CovarianceSpec, Location, SourceTag};
use crate::uncertainty::{fisher_covariance_theta2, sandwich_covariance, theta2_names, InfoMatrices, ScoreClustering};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of EM iterations `K`.
    pub iterations: usize,
    /// `N_1 = draws_per_site * D`.
    pub draws_per_site: usize,
    /// Percentage growth of `N` per iteration.
    pub growth_percent: u32,
    pub sampler: SamplerConfig,
    /// Start each E-step from the previous chain's state and proposal scales.
    pub warm_start: bool,
    /// Burn-in sweeps for warm-started E-steps.
    pub warm_burn_in: usize,
    /// Draws in the final E-step; defaults to `N_K`.
    pub final_draws: Option<usize>,
    /// Nugget standard deviation; held fixed unless `tau_free`.
    pub tau: f64,
    pub tau_free: bool,
    /// Random restarts of the covariance-parameter simplex search.
    pub restarts: usize,
    pub newton_max_iters: usize,
    /// Stop once every parameter moved by less than this relative amount in
    /// each of the last 10 iterations.
    pub stop_rel_change: Option<f64>,
    /// Hold the latent field at its mean (`sigma2 = tau = 0`).
    pub clamp_field: bool,
    pub compute_uncertainty: bool,
    pub score_clustering: ScoreClustering,
    pub theta1_start: Option<DataLayerParams>,
    pub theta2_start: Option<ProcessLayerParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            draws_per_site: 10,
            growth_percent: 10,
            sampler: SamplerConfig::default(),
            warm_start: true,
            warm_burn_in: 200,
            final_draws: None,
            tau: 0.0,
            tau_free: false,
            restarts: 3,
            newton_max_iters: 100,
            stop_rel_change: None,
            clamp_field: false,
            compute_uncertainty: true,
            score_clustering: ScoreClustering::Observation,
            theta1_start: None,
            theta2_start: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.draws_per_site == 0 {
            return Err(Error::Config("draws_per_site must be at least 1".into()));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("tau must be non-negative".into()));
        }
        if self.final_draws == Some(0) {
            return Err(Error::Config("final_draws must be at least 1".into()));
        }
        let mut s = self.sampler.clone();
        s.n_draws = 1;
        s.validate()
    }

    pub fn n_draws(&self, n_sites: usize, iteration: usize) -> usize {
        draw_schedule(n_sites, self.draws_per_site, self.growth_percent, iteration)
    }
}

/// `N_k = ceil(per_site * D * (1 + g/100)^(k-1))`, in exact integer
/// arithmetic.
pub fn draw_schedule(n_sites: usize, per_site: usize, growth_percent: u32, k: usize) -> usize {
    assert!(k >= 1, "iterations are numbered from 1");
    let e = (k - 1) as u32;
    let num = BigUint::from(per_site * n_sites) * BigUint::from(100 + growth_percent).pow(e);
    let den = BigUint::from(100u32).pow(e);
    let q = (&num + &den - 1u32) / &den;
    usize::try_from(q).unwrap_or(usize::MAX)
}

/// One EM iteration: the parameters after its M-step and the Monte Carlo
/// objective on that iteration's draws before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub n_draws: usize,
    pub parameters: Vec<(String, f64)>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub min_acceptance: f64,
    pub max_acceptance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta1: DataLayerParams,
    pub theta2: ProcessLayerParams,
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub final_draws: Option<LatentFieldDraws>,
    pub info: Option<InfoMatrices>,
    /// Set when uncertainty was requested but could not be computed.
    pub info_error: Option<String>,
}

impl FitResult {
    pub fn draws(&self) -> Result<&LatentFieldDraws> {
        self.final_draws
            .as_ref()
            .ok_or_else(|| Error::Dataset("fit result carries no latent draws".into()))
    }
}

/// Parameter names and values in trace order.
pub fn parameter_table(theta1: &DataLayerParams, theta2: &ProcessLayerParams) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = theta1.names().into_iter().zip(theta1.to_vec()).collect();
    out.extend(theta2.mean.names().into_iter().zip(theta2.mean.coefficients().iter().cloned()));
    out.push(("sigma_mu".into(), theta2.cov.sigma2().sqrt()));
    out.push(("phi".into(), theta2.cov.phi()));
    out.push(("delta".into(), theta2.cov.delta()));
    out.push(("tau".into(), theta2.cov.tau()));
    out
}

pub fn e_step<R: Rng + ?Sized>(
    data: &JointDataset,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    n: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<LatentFieldDraws> {
    let cfg = SamplerConfig {
        n_draws: n,
        ..sampler.clone()
    };
    Ok(sample_latent_field_from(data, theta1, theta2, &cfg, &ChainStart::default(), rng)?.draws)
}

/// Distinct draw values of one site with their weights (fraction of draws).
fn weighted_column(draws: &LatentFieldDraws, j: usize) -> Vec<(f64, f64)> {
    let mut col = draws.column(j);
    col.sort_by(f64::total_cmp);
    let w = 1.0 / col.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for v in col {
        match out.last_mut() {
            Some((u, c)) if *u == v => *c += w,
            _ => out.push((v, w)),
        }
    }
    out
}

/// Expected data-layer log-likelihood of one source as a function of
/// `(psi0, psi1 * scale, xi)`, with elevations divided by `scale`.
struct SourceObjective {
    sites: Vec<SourceSite>,
    elev_scale: f64,
}

struct SourceSite {
    obs: Vec<f64>,
    elevation: f64,
    mus: Vec<(f64, f64)>,
}

impl SourceObjective {
    fn new(data: &JointDataset, draws: &LatentFieldDraws, source: SourceTag) -> Self {
        let mut sites = Vec::new();
        for (j, r) in data.records().iter().enumerate() {
            if r.site.location.source != source {
                continue;
            }
            sites.push(SourceSite {
                obs: r.values().collect(),
                elevation: r.site.location.elevation,
                mus: weighted_column(draws, j),
            });
        }
        let elev_scale = sites.iter().map(|s| s.elevation.abs()).fold(0.0, f64::max);
        Self {
            sites,
            elev_scale: if elev_scale > 0.0 { elev_scale } else { 1.0 },
        }
    }

    fn elevation_identified(&self) -> bool {
        let first = self.sites.first().map(|s| s.elevation);
        self.sites.iter().any(|s| Some(s.elevation) != first)
    }

    fn to_internal(&self, p: &SourceParams) -> [f64; 3] {
        [p.psi0, p.psi1 * self.elev_scale, p.xi]
    }

    fn to_params(&self, x: [f64; 3]) -> SourceParams {
        SourceParams {
            psi0: x[0],
            psi1: x[1] / self.elev_scale,
            xi: x[2],
        }
    }

    /// Value and gradient in internal coordinates; `None` when any
    /// observation leaves the support.
    fn eval(&self, x: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let parts: Vec<Option<(f64, [f64; 3])>> = self
            .sites
            .par_iter()
            .map(|s| {
                let e = s.elevation / self.elev_scale;
                let ln_psi = x[0] + x[1] * e;
                let inv_psi = (-ln_psi).exp();
                let xi = x[2];
                let mut v = 0.0;
                let mut g0 = 0.0;
                let mut g2 = 0.0;
                for &(mu, w) in &s.mus {
                    let mut lv = 0.0;
                    let mut l0 = 0.0;
                    let mut l2 = 0.0;
                    for &obs in &s.obs {
                        let (lf, g) = standard_terms((obs - mu) * inv_psi, xi)?;
                        lv += lf;
                        l0 += g[0];
                        l2 += g[1];
                    }
                    v += w * lv;
                    g0 += w * l0;
                    g2 += w * l2;
                }
                v -= s.obs.len() as f64 * ln_psi;
                Some((v, [g0, g0 * e, g2]))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = [0.0; 3];
        for p in parts {
            let (v, g) = p?;
            total += v;
            for k in 0..3 {
                grad[k] += g[k];
            }
        }
        total.is_finite().then_some((total, grad))
    }
}

/// Damped Newton ascent on a smooth objective with analytic gradient and a
/// finite-difference Hessian. `free` masks the coordinates allowed to move.
fn newton_ascent<F>(f: F, start: [f64; 3], free: [bool; 3], max_iters: usize) -> Result<([f64; 3], f64)>
where
    F: Fn([f64; 3]) -> Option<(f64, [f64; 3])>,
{
    let idx: Vec<usize> = (0..3).filter(|&k| free[k]).collect();
    let n = idx.len();
    let mut x = start;
    let (mut fx, mut g) = f(x).ok_or_else(|| Error::Optimizer("data-layer start lies outside the GEV support".into()))?;
    for _ in 0..max_iters {
        let mut h = DMatrix::zeros(n, n);
        let mut fd_ok = true;
        for (a, &k) in idx.iter().enumerate() {
            let step = 1e-5 * x[k].abs().max(1.0);
            let mut xp = x;
            let mut xm = x;
            xp[k] += step;
            xm[k] -= step;
            match (f(xp), f(xm)) {
                (Some((_, gp)), Some((_, gm))) => {
                    for (b, &l) in idx.iter().enumerate() {
                        h[(b, a)] = (gp[l] - gm[l]) / (2.0 * step);
                    }
                }
                _ => fd_ok = false,
            }
        }
        let grad = DVector::from_iterator(n, idx.iter().map(|&k| g[k]));
        let neg_h = -(&h + h.transpose()) * 0.5;
        let dir = if fd_ok {
            let mut lambda = 0.0;
            let scale = neg_h.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
            loop {
                let mut m = neg_h.clone();
                for i in 0..n {
                    m[(i, i)] += lambda;
                }
                if let Some(c) = m.cholesky() {
                    break c.solve(&grad);
                }
                lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
                if lambda > 1e12 * scale {
                    break grad.clone() / scale;
                }
            }
        } else {
            grad.clone() / grad.norm().max(1.0)
        };
        let slope = grad.dot(&dir);
        if slope <= 1e-12 * (1.0 + fx.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut xn = x;
            for (a, &k) in idx.iter().enumerate() {
                xn[k] += t * dir[a];
            }
            if let Some((fn_, gn)) = f(xn) {
                if fn_ >= fx + 1e-4 * t * slope {
                    x = xn;
                    fx = fn_;
                    g = gn;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok((x, fx))
}

/// Monte Carlo expected data-layer log-likelihood.
pub fn data_layer_objective(data: &JointDataset, draws: &LatentFieldDraws, theta1: &DataLayerParams) -> Result<f64> {
    let mut total = 0.0;
    for source in data_sources(data) {
        let obj = SourceObjective::new(data, draws, source);
        let p = theta1.source_params(source)?;
        total += obj.eval(obj.to_internal(p)).map_or(f64::NEG_INFINITY, |(v, _)| v);
    }
    Ok(total)
}

fn data_sources(data: &JointDataset) -> Vec<SourceTag> {
    let present = data.sources();
    SourceTag::ALL.into_iter().filter(|s| present.contains(s)).collect()
}

fn check_draws(data_sites: usize, draws: &LatentFieldDraws) -> Result<()> {
    if draws.n_draws() == 0 {
        return Err(Error::Dataset("no latent draws".into()));
    }
    if draws.n_sites() != data_sites {
        return Err(Error::Dataset("draws and dataset disagree on the number of sites".into()));
    }
    Ok(())
}

/// Maximizes the Monte Carlo data-layer objective, source by source.
pub fn m_step_theta1(
    data: &JointDataset,
    draws: &LatentFieldDraws,
    start: &DataLayerParams,
    max_iters: usize,
) -> Result<DataLayerParams> {
    check_draws(data.n_sites(), draws)?;
    let mut out = *start;
    for source in data_sources(data) {
        let obj = SourceObjective::new(data, draws, source);
        let x0 = obj.to_internal(start.source_params(source)?);
        let free = [true, obj.elevation_identified(), true];
        let (x, _) = newton_ascent(|x| obj.eval(x), x0, free, max_iters)?;
        out.set(source, obj.to_params(x));
    }
    Ok(out)
}

/// Sufficient statistics of the draws for the process layer: mean vector
/// and (biased) scatter matrix.
#[derive(Debug, Clone)]
pub struct DrawMoments {
    pub mean: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

impl DrawMoments {
    pub fn new(draws: &LatentFieldDraws) -> Self {
        let d = draws.n_sites();
        let n = draws.n_draws() as f64;
        let mean = DVector::from_vec(draws.mean());
        let mut scatter = DMatrix::zeros(d, d);
        for row in draws.rows() {
            let r = DVector::from_iterator(d, row.iter().zip(mean.iter()).map(|(a, b)| a - b));
            scatter.ger(1.0 / n, &r, &r, 1.0);
        }
        Self { mean, scatter }
    }
}

/// Unconstrained coordinates of the covariance parameters:
/// `(ln sigma2, ln phi, logit(delta / 2)[, ln tau])`.
pub fn cov_to_unconstrained(spec: &CovarianceSpec, tau_free: bool) -> Vec<f64> {
    let h = spec.delta() / 2.0;
    let mut v = vec![spec.sigma2().ln(), spec.phi().ln(), (h / (1.0 - h)).ln()];
    if tau_free {
        v.push(spec.tau().ln());
    }
    v
}

pub fn cov_from_unconstrained(v: &[f64], fixed_tau: f64) -> Result<CovarianceSpec> {
    let delta = 2.0 / (1.0 + (-v[2]).exp());
    let tau = if v.len() > 3 { v[3].exp() } else { fixed_tau };
    CovarianceSpec::new(v[0].exp(), tau, v[1].exp(), delta.min(2.0))
}

/// Derivatives of the covariance matrix in the unconstrained coordinates.
pub(crate) fn covariance_derivatives(spec: &CovarianceSpec, sites: &[Location], tau_free: bool) -> Vec<DMatrix<f64>> {
    let d = sites.len();
    let (s2, phi, delta) = (spec.sigma2(), spec.phi(), spec.delta());
    let mut d_s2 = DMatrix::zeros(d, d);
    let mut d_phi = DMatrix::zeros(d, d);
    let mut d_delta = DMatrix::zeros(d, d);
    for i in 0..d {
        d_s2[(i, i)] = s2;
        for j in 0..i {
            let dist = sites[i].distance_km(&sites[j]);
            let c = spec.decay(dist);
            d_s2[(i, j)] = s2 * c;
            if dist > 0.0 {
                let r = dist / phi;
                let rd = r.powf(delta);
                d_phi[(i, j)] = s2 * c * delta * rd;
                d_delta[(i, j)] = -s2 * c * rd * r.ln() * delta * (1.0 - delta / 2.0);
            }
            for m in [&mut d_s2, &mut d_phi, &mut d_delta] {
                m[(j, i)] = m[(i, j)];
            }
        }
    }
    let mut out = vec![d_s2, d_phi, d_delta];
    if tau_free {
        out.push(DMatrix::identity(d, d) * (2.0 * spec.tau() * spec.tau()));
    }
    out
}

/// GLS coefficients `(X' S^-1 X)^-1 X' S^-1 y`.
pub(crate) fn gls(factor: &CholeskyFactor, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let sx = factor.solve_matrix(x);
    let a = x.transpose() * &sx;
    let b = sx.transpose() * y;
    solve_normal_equations(a, b)
}

fn solve_normal_equations(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.solve(&b));
    }
    let svd = a.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(&b, tol).map_err(|e| Error::Optimizer(e.to_string()))
}

/// Monte Carlo expected process-layer log-likelihood.
pub fn process_layer_objective(
    moments: &DrawMoments,
    design: &DMatrix<f64>,
    sites: &[Location],
    spec: &CovarianceSpec,
    beta: &DVector<f64>,
) -> Result<f64> {
    let d = sites.len() as f64;
    let r = &moments.mean - design * beta;
    if spec.total_variance() == 0.0 {
        let sse: f64 = r.iter().map(|v| v * v).sum::<f64>() + moments.scatter.trace();
        return Ok(if sse == 0.0 { f64::INFINITY } else { f64::NEG_INFINITY });
    }
    let f = CholeskyFactor::for_covariance(spec, covariance_matrix(spec, sites)?)?;
    let tr = f.solve_matrix(&moments.scatter).trace();
    Ok(-0.5 * f.log_det() - 0.5 * tr - 0.5 * f.quad_form(&r) - 0.5 * d * LN_2PI)
}

/// Profiled objective: the mean coefficients at their GLS value.
fn profiled_objective(moments: &DrawMoments, design: &DMatrix<f64>, sites: &[Location], spec: &CovarianceSpec) -> Result<(f64, DVector<f64>)> {
    let f = CholeskyFactor::for_covariance(spec, covariance_matrix(spec, sites)?)?;
    let beta = gls(&f, design, &moments.mean)?;
    let r = &moments.mean - design * &beta;
    let d = sites.len() as f64;
    let tr = f.solve_matrix(&moments.scatter).trace();
    Ok((-0.5 * f.log_det() - 0.5 * tr - 0.5 * f.quad_form(&r) - 0.5 * d * LN_2PI, beta))
}

/// Maximizes the Monte Carlo process-layer objective: GLS for the mean
/// coefficients, simplex search with restarts for the covariance.
pub fn m_step_theta2(
    draws: &LatentFieldDraws,
    sites: &[Location],
    start: &ProcessLayerParams,
    restarts: usize,
) -> Result<ProcessLayerParams> {
    if draws.n_draws() == 0 {
        return Err(Error::Dataset("no latent draws".into()));
    }
    if draws.n_sites() != sites.len() {
        return Err(Error::Dataset("draws and sites disagree on dimension".into()));
    }
    let moments = DrawMoments::new(draws);
    let design = start.mean.design_matrix(sites)?;
    let mut out = start.clone();
    if start.cov.total_variance() == 0.0 {
        let beta = solve_normal_equations(design.transpose() * &design, design.transpose() * &moments.mean)?;
        out.mean.set_coefficients(beta.iter().cloned().collect());
        return Ok(out);
    }
    let tau_free = !start.tau_fixed;
    let fixed_tau = start.cov.tau();
    let objective = |v: &[f64]| -> f64 {
        match cov_from_unconstrained(v, fixed_tau) {
            Ok(spec) => match profiled_objective(&moments, &design, sites, &spec) {
                Ok((q, _)) if q.is_finite() => -q,
                _ => f64::INFINITY,
            },
            Err(_) => f64::INFINITY,
        }
    };
    let mut x0 = cov_to_unconstrained(&start.cov, tau_free);
    if x0.iter().any(|v| !v.is_finite()) {
        x0 = x0.iter().map(|v| v.clamp(-20.0, 20.0)).collect();
    }
    let opts = SimplexOptions {
        restarts,
        step: 0.3,
        sd_tolerance: 1e-10,
        max_iters: 1000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let best = minimize(objective, &x0, &opts, &mut rng)?;
    let spec = cov_from_unconstrained(&best.x, fixed_tau)?;
    let (_, beta) = profiled_objective(&moments, &design, sites, &spec)?;
    out.cov = spec;
    out.mean.set_coefficients(beta.iter().cloned().collect());
    Ok(out)
}

/// Starting values: per-site GEV fits, then a log-linear regression of the
/// scales on elevation and an ordinary least-squares fit of the site
/// locations on the mean design.
pub fn initial_parameters(data: &JointDataset, tau: f64, tau_fixed: bool) -> Result<(DataLayerParams, ProcessLayerParams)> {
    let sources = data_sources(data);
    let sites = data.locations();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1417);
    let fits: Vec<[f64; 3]> = data
        .records()
        .iter()
        .map(|r| site_gev_fit(&r.values().collect::<Vec<_>>(), &mut rng))
        .collect();
    let mut theta1 = DataLayerParams {
        field: None,
        simulator: None,
    };
    for &source in &sources {
        let idx: Vec<usize> = (0..sites.len()).filter(|&j| sites[j].source == source).collect();
        let elev: Vec<f64> = idx.iter().map(|&j| sites[j].elevation).collect();
        let lpsi: Vec<f64> = idx.iter().map(|&j| fits[j][1]).collect();
        let (psi0, psi1) = simple_regression(&elev, &lpsi);
        let xi = idx.iter().map(|&j| fits[j][2]).sum::<f64>() / idx.len() as f64;
        theta1.set(
            source,
            SourceParams {
                psi0,
                psi1,
                xi: xi.clamp(-0.3, 0.4),
            },
        );
    }
    let mean = MeanStructure::constant(sources, 0.0);
    let x = mean.design_matrix(&sites)?;
    let y = DVector::from_iterator(sites.len(), fits.iter().map(|f| f[0]));
    let beta = solve_normal_equations(x.transpose() * &x, x.transpose() * &y)?;
    let resid = &y - &x * &beta;
    let d = sites.len() as f64;
    let spread = y.iter().map(|v| (v - y.mean()).powi(2)).sum::<f64>() / d;
    let sigma2 = (resid.norm_squared() / d).max(1e-2 * spread).max(1e-2);
    let mut dists = Vec::new();
    for i in 0..sites.len() {
        for j in 0..i {
            dists.push(sites[i].distance_km(&sites[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let phi = dists.get(dists.len() / 2).cloned().filter(|v| *v > 0.0).unwrap_or(1.0) / 2.0;
    let mut mean = mean;
    mean.set_coefficients(beta.iter().cloned().collect());
    let theta2 = ProcessLayerParams {
        mean,
        cov: CovarianceSpec::new(sigma2, tau, phi, 1.0)?,
        tau_fixed,
    };
    Ok((theta1, theta2))
}

fn simple_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return (my, 0.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Maximum-likelihood `(mu, ln psi, xi)` of one sample, from a
/// method-of-moments Gumbel start.
fn site_gev_fit<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> [f64; 3] {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let psi = if var > 0.0 { var.sqrt() * 6f64.sqrt() / PI } else { 0.1 * m.abs().max(1.0) };
    let start = [m - 0.577_215_664_9 * psi, psi.ln(), 0.05];
    if x.len() < 3 {
        return start;
    }
    let nll = |p: &[f64]| -> f64 {
        let inv = (-p[1]).exp();
        let mut s = 0.0;
        for &v in x {
            match standard_terms((v - p[0]) * inv, p[2]) {
                Some((lf, _)) => s += lf - p[1],
                None => return f64::INFINITY,
            }
        }
        -s
    };
    let opts = SimplexOptions {
        restarts: 1,
        step: 0.1,
        ..Default::default()
    };
    match minimize(nll, &start, &opts, rng) {
        Ok(m) if m.x[2].abs() < 1.0 => [m.x[0], m.x[1], m.x[2]],
        _ => start,
    }
}

fn max_relative_change(a: &[(String, f64)], b: &[(String, f64)]) -> f64 {
    a.iter()
        .zip(b)
        .map(|((_, x), (_, y))| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Runs the EM iterations and a final E-step at the last estimate.
pub fn fit<R: Rng + ?Sized>(data: &JointDataset, cfg: &FitConfig, rng: &mut R) -> Result<FitResult> {
    cfg.validate()?;
    let sites = data.locations();
    let d = data.n_sites();
    let (init1, init2) = initial_parameters(data, cfg.tau, !cfg.tau_free)?;
    let mut theta1 = cfg.theta1_start.unwrap_or(init1);
    let mut theta2 = cfg.theta2_start.clone().unwrap_or(init2);
    if cfg.clamp_field {
        theta2.cov = CovarianceSpec::new(0.0, 0.0, theta2.cov.phi(), theta2.cov.delta())?;
    }
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iterations);
    let mut start = ChainStart::default();
    let mut last_n = 0;
    let mut quiet_iterations = 0;

    for k in 1..=cfg.iterations {
        let n = cfg.n_draws(d, k);
        last_n = n;
        let step = (|| -> Result<(DataLayerParams, ProcessLayerParams, TraceRow, ChainStart)> {
            let mut scfg = SamplerConfig {
                n_draws: n,
                ..cfg.sampler.clone()
            };
            if k > 1 && cfg.warm_start {
                scfg.burn_in = cfg.warm_burn_in;
            }
            let out = sample_latent_field_from(data, &theta1, &theta2, &scfg, &start, rng)?;
            let draws = &out.draws;
            let moments = DrawMoments::new(draws);
            let design = theta2.mean.design_matrix(&sites)?;
            let q_before = data_layer_objective(data, draws, &theta1)?
                + process_layer_objective(&moments, &design, &sites, &theta2.cov, &DVector::from_column_slice(theta2.mean.coefficients()))?;
            let t1 = m_step_theta1(data, draws, &theta1, cfg.newton_max_iters)?;
            let t2 = m_step_theta2(draws, &sites, &theta2, cfg.restarts)?;
            let q_after = data_layer_objective(data, draws, &t1)?
                + process_layer_objective(&moments, &design, &sites, &t2.cov, &DVector::from_column_slice(t2.mean.coefficients()))?;
            let rates = &draws.acceptance_rates;
            let row = TraceRow {
                iteration: k,
                n_draws: n,
                parameters: parameter_table(&t1, &t2),
                objective_before: q_before,
                objective_after: q_after,
                min_acceptance: rates.iter().cloned().fold(f64::INFINITY, f64::min),
                max_acceptance: rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            let next = if cfg.warm_start {
                ChainStart {
                    state: Some(out.final_state.clone()),
                    scales: Some(draws.proposal_scales.clone()),
                }
            } else {
                ChainStart::default()
            };
            Ok((t1, t2, row, next))
        })();
        match step {
            Ok((t1, t2, row, next)) => {
                if let (Some(tol), Some(prev)) = (cfg.stop_rel_change, trace.last()) {
                    if max_relative_change(&prev.parameters, &row.parameters) < tol {
                        quiet_iterations += 1;
                    } else {
                        quiet_iterations = 0;
                    }
                }
                theta1 = t1;
                theta2 = t2;
                start = next;
                trace.push(row);
                if quiet_iterations >= 10 {
                    break;
                }
            }
            Err(e) => {
                return Err(Error::FitAborted {
                    iteration: k,
                    source: Box::new(e),
                    trace,
                })
            }
        }
    }

    let n_final = cfg.final_draws.unwrap_or(last_n);
    let scfg = SamplerConfig {
        n_draws: n_final,
        burn_in: if cfg.warm_start { cfg.warm_burn_in } else { cfg.sampler.burn_in },
        ..cfg.sampler.clone()
    };
    let final_draws = sample_latent_field_from(data, &theta1, &theta2, &scfg, &start, rng)
        .map_err(|e| Error::FitAborted {
            iteration: trace.len() + 1,
            source: Box::new(e),
            trace: trace.clone(),
        })?
        .draws;

    let (info, info_error) = if cfg.compute_uncertainty && !cfg.clamp_field {
        match compute_info(data, &final_draws, &theta1, &theta2, cfg.score_clustering) {
            Ok(i) => (Some(i), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    Ok(FitResult {
        theta1,
        theta2,
        trace,
        final_draws: Some(final_draws),
        info,
        info_error,
    })
}

fn compute_info(
    data: &JointDataset,
    draws: &LatentFieldDraws,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    clustering: ScoreClustering,
) -> Result<InfoMatrices> {
    let mut info = sandwich_covariance(data, draws, theta1, clustering)?;
    info.theta2_names = theta2_names(theta2);
    let p = info.theta2_names.len();
    match fisher_covariance_theta2(draws, &data.locations(), theta2, false) {
        Ok((cov, held)) => {
            info.fisher_cov_theta2 = cov;
            info.theta2_held = held;
        }
        Err(_) => {
            info.fisher_cov_theta2 = DMatrix::zeros(p, p);
            info.theta2_held = info.theta2_names.clone();
        }
    }
    Ok(info)
}
