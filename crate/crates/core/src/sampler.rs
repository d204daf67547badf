//! Metropolis-within-Gibbs sampler for the latent location field given the
//! annual maxima.
//!
//! Each sweep visits the sites in order. The update at site `j` targets
//! `sum_t log f1(x_t(s_j) | mu_j) + log N(mu_j; cond. mean, cond. var)`,
//! where the Gaussian conditional comes from the precision matrix of the
//! latent field, so one update costs `O(T_j + D)`.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::{standard_log_density, XI_SWITCH};
use crate::gp::LatentFieldDraws;
use crate::linalg::CholeskyFactor;
use crate::model::{DataLayerParams, JointDataset, ProcessLayerParams};
use crate::spatial::covariance_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Per-site random-walk standard deviations; empty picks them from the
    /// approximate posterior curvature.
    #[serde(default)]
    pub proposal_scales: Vec<f64>,
    pub adapt: bool,
    pub target_accept: f64,
    /// Sweeps per adaptation batch during burn-in.
    pub adapt_batch: usize,
    /// Independent chains sharing the requested draws.
    pub n_chains: usize,
    /// Keep a per-update trace (debug).
    #[serde(default)]
    pub trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_draws: 1000,
            burn_in: 1000,
            thin: 1,
            proposal_scales: Vec::new(),
            adapt: true,
            target_accept: 0.44,
            adapt_batch: 50,
            n_chains: 1,
            trace: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::Config("n_draws must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.adapt_batch == 0 {
            return Err(Error::Config("adapt_batch must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0,1)".into()));
        }
        if self.proposal_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("proposal scales must be positive".into()));
        }
        Ok(())
    }
}

/// Per-site acceptance counts over one adaptation batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AcceptanceStats {
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    /// Number of batches completed before this one.
    pub batch: usize,
}

impl AcceptanceStats {
    pub fn new(n_sites: usize) -> Self {
        Self {
            accepted: vec![0; n_sites],
            proposed: vec![0; n_sites],
            batch: 0,
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.proposed)
            .map(|(&a, &p)| if p == 0 { f64::NAN } else { a as f64 / p as f64 })
            .collect()
    }

    fn reset(&mut self) {
        self.accepted.iter_mut().for_each(|v| *v = 0);
        self.proposed.iter_mut().for_each(|v| *v = 0);
    }
}

/// Robbins-Monro step on the log proposal scales toward `target_accept`.
pub fn adapt_proposals(history: &AcceptanceStats, cfg: &SamplerConfig) -> SamplerConfig {
    let gain = 1.0 / ((history.batch + 1) as f64).sqrt();
    let mut out = cfg.clone();
    for (scale, rate) in out.proposal_scales.iter_mut().zip(history.rates()) {
        if rate.is_finite() {
            *scale *= (gain * (rate - cfg.target_accept)).exp();
        }
    }
    out
}

/// Metropolis accept/reject for a symmetric proposal.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Data-layer likelihood of one site as a function of its latent location.
pub trait SiteLikelihood: Sync {
    fn n_sites(&self) -> usize;

    fn log_lik(&self, site: usize, mu: f64) -> f64;

    /// Approximate negative second derivative of `log_lik` in `mu`, used
    /// only to size initial proposals.
    fn curvature_hint(&self, _site: usize) -> f64 {
        0.0
    }

    /// Moves a starting value into the region where `log_lik` is finite.
    fn clamp_initial(&self, _site: usize, mu: f64) -> f64 {
        mu
    }
}

/// GEV annual maxima at each site with fixed scale and shape.
#[derive(Debug, Clone)]
pub struct GevSiteLikelihood {
    obs: Vec<Vec<f64>>,
    inv_psi: Vec<f64>,
    ln_psi: Vec<f64>,
    psi: Vec<f64>,
    xi: Vec<f64>,
}

impl GevSiteLikelihood {
    pub fn new(data: &JointDataset, theta1: &DataLayerParams) -> Result<Self> {
        let mut out = Self {
            obs: Vec::new(),
            inv_psi: Vec::new(),
            ln_psi: Vec::new(),
            psi: Vec::new(),
            xi: Vec::new(),
        };
        for r in data.records() {
            let loc = &r.site.location;
            let psi = theta1.psi_at(loc)?;
            if !(psi > 0.0) || !psi.is_finite() {
                return Err(Error::Sampler(format!("non-finite scale at site {}", r.site.id)));
            }
            out.obs.push(r.values().collect());
            out.psi.push(psi);
            out.inv_psi.push(1.0 / psi);
            out.ln_psi.push(psi.ln());
            out.xi.push(theta1.xi_for(loc.source)?);
        }
        Ok(out)
    }

    /// Open interval of `mu` values keeping every observation in support.
    pub fn mu_bounds(&self, site: usize) -> (f64, f64) {
        let xi = self.xi[site];
        let psi = self.psi[site];
        let obs = &self.obs[site];
        if xi.abs() < XI_SWITCH {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if xi > 0.0 {
            let min = obs.iter().cloned().fold(f64::INFINITY, f64::min);
            (f64::NEG_INFINITY, min + psi / xi)
        } else {
            let max = obs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (max + psi / xi, f64::INFINITY)
        }
    }
}

impl SiteLikelihood for GevSiteLikelihood {
    fn n_sites(&self) -> usize {
        self.obs.len()
    }

    #[inline]
    fn log_lik(&self, site: usize, mu: f64) -> f64 {
        let inv = self.inv_psi[site];
        let xi = self.xi[site];
        let mut acc = 0.0;
        for &x in &self.obs[site] {
            acc += standard_log_density((x - mu) * inv, xi);
        }
        acc - self.obs[site].len() as f64 * self.ln_psi[site]
    }

    fn curvature_hint(&self, site: usize) -> f64 {
        self.obs[site].len() as f64 * self.inv_psi[site] * self.inv_psi[site]
    }

    fn clamp_initial(&self, site: usize, mu: f64) -> f64 {
        let (lo, hi) = self.mu_bounds(site);
        let margin = 0.1 * self.psi[site];
        if mu >= hi - margin {
            hi - margin
        } else if mu <= lo + margin {
            lo + margin
        } else {
            mu
        }
    }
}

/// Gaussian prior on the latent field in precision form.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    /// Row-major precision; `None` for a degenerate (zero-variance) field.
    precision: Option<Vec<f64>>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, covariance: Option<&CholeskyFactor>) -> Self {
        let precision = covariance.map(|f| {
            let q: DMatrix<f64> = f.inverse();
            let d = q.nrows();
            let mut flat = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    flat.push(q[(i, j)]);
                }
            }
            flat
        });
        Self { mean, precision }
    }

    pub fn from_process_layer(data: &JointDataset, theta2: &ProcessLayerParams) -> Result<Self> {
        let sites = data.locations();
        let mean = theta2.mean.means(&sites)?;
        if theta2.cov.total_variance() == 0.0 {
            return Ok(Self::new(mean, None));
        }
        let factor = CholeskyFactor::for_covariance(&theta2.cov, covariance_matrix(&theta2.cov, &sites)?)?;
        Ok(Self::new(mean, Some(&factor)))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }

    fn precision_diag(&self, j: usize) -> f64 {
        let d = self.dim();
        self.precision.as_ref().map_or(f64::INFINITY, |q| q[j * d + j])
    }

    /// Conditional mean and precision of coordinate `j` given the residuals
    /// `r = mu - m` of the others.
    #[inline]
    fn conditional(&self, j: usize, residual: &[f64]) -> (f64, f64) {
        let d = self.dim();
        let q = self.precision.as_ref().expect("non-degenerate prior");
        let row = &q[j * d..(j + 1) * d];
        let qjj = row[j];
        let mut dot = 0.0;
        for (k, (a, b)) in row.iter().zip(residual).enumerate() {
            if k != j {
                dot += a * b;
            }
        }
        (self.mean[j] - dot / qjj, qjj)
    }
}

/// Where a chain starts: explicit state and scales, or the prior mean with
/// curvature-based scales.
#[derive(Debug, Clone, Default)]
pub struct ChainStart {
    pub state: Option<Vec<f64>>,
    pub scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainTraceRow {
    pub iteration: usize,
    pub site: usize,
    pub value: f64,
    pub accepted: bool,
}

/// Output of one or more chains.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: LatentFieldDraws,
    pub final_state: Vec<f64>,
    pub trace: Vec<ChainTraceRow>,
}

/// Runs the sampler for an arbitrary data-layer likelihood.
pub fn run_sampler<L: SiteLikelihood, R: Rng + ?Sized>(
    lik: &L,
    prior: &GaussianPrior,
    sites: Vec<crate::spatial::Location>,
    cfg: &SamplerConfig,
    start: &ChainStart,
    rng: &mut R,
) -> Result<ChainOutput> {
    cfg.validate()?;
    let d = prior.dim();
    if lik.n_sites() != d || sites.len() != d {
        return Err(Error::Sampler("likelihood, prior and sites disagree on dimension".into()));
    }
    if prior.is_degenerate() {
        return degenerate_chain(lik, prior, sites, cfg);
    }
    let chains = cfg.n_chains.min(cfg.n_draws);
    if chains <= 1 {
        return run_chain(lik, prior, sites, cfg, start, rng);
    }
    let per = cfg.n_draws / chains;
    let extra = cfg.n_draws % chains;
    let seeds: Vec<u64> = (0..chains).map(|_| rng.next_u64()).collect();
    let outputs: Vec<Result<ChainOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .enumerate()
            .map(|(c, &seed)| {
                let mut sub = cfg.clone();
                sub.n_draws = per + usize::from(c < extra);
                sub.n_chains = 1;
                let sites = sites.clone();
                scope.spawn(move || {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    run_chain(lik, prior, sites, &sub, start, &mut r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampler thread panicked")).collect()
    });
    let mut values = Vec::with_capacity(cfg.n_draws * d);
    let mut rates = vec![0.0; d];
    let mut scales = vec![0.0; d];
    let mut trace = Vec::new();
    let mut final_state = Vec::new();
    for out in outputs {
        let out = out?;
        for r in out.draws.rows() {
            values.extend_from_slice(r);
        }
        for j in 0..d {
            rates[j] += out.draws.acceptance_rates[j] / chains as f64;
            scales[j] += out.draws.proposal_scales[j] / chains as f64;
        }
        trace.extend(out.trace);
        final_state = out.final_state;
    }
    let mut draws = LatentFieldDraws::from_flat(sites, values);
    draws.acceptance_rates = rates;
    draws.proposal_scales = scales;
    draws.burn_in = cfg.burn_in;
    draws.thin = cfg.thin;
    Ok(ChainOutput {
        draws,
        final_state,
        trace,
    })
}

fn degenerate_chain<L: SiteLikelihood>(
    lik: &L,
    prior: &GaussianPrior,
    sites: Vec<crate::spatial::Location>,
    cfg: &SamplerConfig,
) -> Result<ChainOutput> {
    for (j, &m) in prior.mean().iter().enumerate() {
        if !lik.log_lik(j, m).is_finite() {
            return Err(Error::Sampler(format!(
                "non-finite target at site {j}: data lie outside the GEV support at the fixed latent mean"
            )));
        }
    }
    let values: Vec<f64> = (0..cfg.n_draws).flat_map(|_| prior.mean().to_vec()).collect();
    let mut draws = LatentFieldDraws::from_flat(sites, values);
    draws.acceptance_rates = vec![0.0; prior.dim()];
    draws.proposal_scales = vec![0.0; prior.dim()];
    draws.burn_in = cfg.burn_in;
    draws.thin = cfg.thin;
    Ok(ChainOutput {
        draws,
        final_state: prior.mean().to_vec(),
        trace: Vec::new(),
    })
}

fn run_chain<L: SiteLikelihood, R: Rng + ?Sized>(
    lik: &L,
    prior: &GaussianPrior,
    sites: Vec<crate::spatial::Location>,
    cfg: &SamplerConfig,
    start: &ChainStart,
    rng: &mut R,
) -> Result<ChainOutput> {
    let d = prior.dim();
    let mut state: Vec<f64> = match &start.state {
        Some(s) if s.len() == d => s
            .iter()
            .enumerate()
            .map(|(j, &v)| if lik.log_lik(j, v).is_finite() { v } else { lik.clamp_initial(j, v) })
            .collect(),
        Some(_) => return Err(Error::Sampler("start state has the wrong dimension".into())),
        None => (0..d).map(|j| lik.clamp_initial(j, prior.mean()[j])).collect(),
    };
    let mut residual: Vec<f64> = state.iter().zip(prior.mean()).map(|(a, b)| a - b).collect();
    let mut log_lik: Vec<f64> = (0..d).map(|j| lik.log_lik(j, state[j])).collect();
    if let Some(j) = log_lik.iter().position(|v| !v.is_finite()) {
        return Err(Error::Sampler(format!(
            "non-finite target at initialization at site {j} (parameters or data outside the GEV support)"
        )));
    }

    let mut cfg = cfg.clone();
    cfg.proposal_scales = if let Some(s) = &start.scales {
        s.clone()
    } else if cfg.proposal_scales.len() == d {
        cfg.proposal_scales.clone()
    } else {
        (0..d)
            .map(|j| 1.0 / (prior.precision_diag(j) + lik.curvature_hint(j)).sqrt())
            .collect()
    };
    cfg.validate()?;

    let total = cfg.burn_in + cfg.n_draws * cfg.thin;
    let mut batch = AcceptanceStats::new(d);
    let mut kept = AcceptanceStats::new(d);
    let mut values = Vec::with_capacity(cfg.n_draws * d);
    let mut trace = Vec::new();

    for sweep in 0..total {
        let burning = sweep < cfg.burn_in;
        for j in 0..d {
            let (cmean, cprec) = prior.conditional(j, &residual);
            let current = state[j];
            let proposal = current + cfg.proposal_scales[j] * rng.sample::<f64, _>(StandardNormal);
            let prop_ll = lik.log_lik(j, proposal);
            let log_ratio = if prop_ll.is_finite() {
                let dc = current - cmean;
                let dp = proposal - cmean;
                prop_ll - log_lik[j] - 0.5 * cprec * (dp * dp - dc * dc)
            } else {
                f64::NEG_INFINITY
            };
            let accepted = metropolis_accept(log_ratio, rng);
            if accepted {
                state[j] = proposal;
                residual[j] = proposal - prior.mean()[j];
                log_lik[j] = prop_ll;
            }
            let stats = if burning { &mut batch } else { &mut kept };
            stats.proposed[j] += 1;
            stats.accepted[j] += u64::from(accepted);
            if cfg.trace {
                trace.push(ChainTraceRow {
                    iteration: sweep,
                    site: j,
                    value: state[j],
                    accepted,
                });
            }
        }
        if burning && cfg.adapt && (sweep + 1) % cfg.adapt_batch == 0 {
            cfg = adapt_proposals(&batch, &cfg);
            batch.reset();
            batch.batch += 1;
        }
        if !burning && (sweep - cfg.burn_in + 1) % cfg.thin == 0 {
            values.extend_from_slice(&state);
        }
    }

    let mut draws = LatentFieldDraws::from_flat(sites, values);
    draws.acceptance_rates = kept.rates();
    draws.proposal_scales = cfg.proposal_scales.clone();
    draws.burn_in = cfg.burn_in;
    draws.thin = cfg.thin;
    Ok(ChainOutput {
        draws,
        final_state: state,
        trace,
    })
}

/// Draws from the latent field given the data under `(theta1, theta2)`.
pub fn sample_latent_field<R: Rng + ?Sized>(
    data: &JointDataset,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<LatentFieldDraws> {
    Ok(sample_latent_field_from(data, theta1, theta2, cfg, &ChainStart::default(), rng)?.draws)
}

/// As [`sample_latent_field`], starting from a given state.
pub fn sample_latent_field_from<R: Rng + ?Sized>(
    data: &JointDataset,
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    cfg: &SamplerConfig,
    start: &ChainStart,
    rng: &mut R,
) -> Result<ChainOutput> {
    let lik = GevSiteLikelihood::new(data, theta1)?;
    let prior = GaussianPrior::from_process_layer(data, theta2)?;
    run_sampler(&lik, &prior, data.locations(), cfg, start, rng)
}

/// Writes a chain trace as `iteration,site_id,value,accepted`.
pub fn write_chain_trace(path: &Path, trace: &[ChainTraceRow], site_ids: &[String]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,site_id,value,accepted")?;
    for row in trace {
        writeln!(
            w,
            "{},{},{},{}",
            row.iteration,
            site_ids.get(row.site).map(String::as_str).unwrap_or("?"),
            row.value,
            u8::from(row.accepted)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{CovarianceSpec, Location, SourceTag};

    #[test]
    fn adaptation_fixed_point_and_growth() {
        let cfg = SamplerConfig {
            proposal_scales: vec![1.0, 2.0],
            ..Default::default()
        };
        let at_target = AcceptanceStats {
            accepted: vec![44, 22],
            proposed: vec![100, 50],
            batch: 3,
        };
        let same = adapt_proposals(&at_target, &cfg);
        assert!((same.proposal_scales[0] - 1.0).abs() < 1e-12);
        assert!((same.proposal_scales[1] - 2.0).abs() < 1e-12);

        let mut scales = cfg.clone();
        for batch in 0..20 {
            let all = AcceptanceStats {
                accepted: vec![50, 50],
                proposed: vec![50, 50],
                batch,
            };
            let next = adapt_proposals(&all, &scales);
            assert!(next.proposal_scales[0] > scales.proposal_scales[0]);
            scales = next;
        }
    }

    #[test]
    fn metropolis_accepts_uphill_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(metropolis_accept(0.0, &mut rng));
        assert!(metropolis_accept(1.0, &mut rng));
        assert!(!metropolis_accept(f64::NEG_INFINITY, &mut rng));
        assert!(!metropolis_accept(f64::NAN, &mut rng));
    }

    #[test]
    fn two_state_detailed_balance() {
        // frozen kernel on {0, 1}: propose the other state, accept by ratio
        let log_pi = [0.3f64.ln(), 0.7f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = 0usize;
        let mut counts = [[0u64; 2]; 2];
        let n = 400_000;
        for _ in 0..n {
            let prop = 1 - state;
            let next = if metropolis_accept(log_pi[prop] - log_pi[state], &mut rng) { prop } else { state };
            counts[state][next] += 1;
            state = next;
        }
        let flow_01 = counts[0][1] as f64 / n as f64;
        let flow_10 = counts[1][0] as f64 / n as f64;
        // both flows equal pi_0 * P(0->1) = 0.3
        assert!((flow_01 - flow_10).abs() < 3.0 / (n as f64).sqrt());
        assert!((flow_01 - 0.3).abs() < 0.005);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { n_draws: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { thin: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig {
            proposal_scales: vec![1.0, -1.0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig::default().validate().is_ok());
    }

    struct Flat(usize);

    impl SiteLikelihood for Flat {
        fn n_sites(&self) -> usize {
            self.0
        }
        fn log_lik(&self, _: usize, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn chain_is_reproducible_and_sized() {
        let sites = vec![
            Location::planar(0.0, 0.0, 0.0, SourceTag::Field),
            Location::planar(5.0, 0.0, 0.0, SourceTag::Field),
        ];
        let spec = CovarianceSpec::new(1.0, 0.0, 5.0, 1.0).unwrap();
        let f = CholeskyFactor::for_covariance(&spec, covariance_matrix(&spec, &sites).unwrap()).unwrap();
        let prior = GaussianPrior::new(vec![0.0, 1.0], Some(&f));
        let cfg = SamplerConfig {
            n_draws: 37,
            burn_in: 20,
            thin: 3,
            ..Default::default()
        };
        let a = run_sampler(&Flat(2), &prior, sites.clone(), &cfg, &ChainStart::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = run_sampler(&Flat(2), &prior, sites.clone(), &cfg, &ChainStart::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws.n_draws(), 37);
        let multi = SamplerConfig { n_chains: 3, ..cfg };
        let c = run_sampler(&Flat(2), &prior, sites, &multi, &ChainStart::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.draws.n_draws(), 37);
    }

    #[test]
    fn degenerate_prior_returns_mean() {
        let sites = vec![Location::planar(0.0, 0.0, 0.0, SourceTag::Field)];
        let prior = GaussianPrior::new(vec![4.0], None);
        let cfg = SamplerConfig {
            n_draws: 5,
            ..Default::default()
        };
        let out = run_sampler(&Flat(1), &prior, sites, &cfg, &ChainStart::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.draws.rows().all(|r| r == [4.0]));
    }
}
