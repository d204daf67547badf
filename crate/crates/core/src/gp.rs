//! Gaussian-process layer on the GEV location parameter: density,
//! simulation and kriging.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;
use crate::model::MeanStructure;
use crate::spatial::{covariance_matrix, CovarianceSpec, Location};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monte Carlo draws of the latent location field, one row per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFieldDraws {
    n_sites: usize,
    /// Row-major `N x D`.
    values: Vec<f64>,
    pub sites: Vec<Location>,
    #[serde(with = "nan_as_null")]
    pub acceptance_rates: Vec<f64>,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal scales in force after adaptation.
    #[serde(with = "nan_as_null")]
    pub proposal_scales: Vec<f64>,
}

/// JSON has no NaN; undefined rates and scales travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let o: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(o.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

impl LatentFieldDraws {
    pub fn from_rows(sites: Vec<Location>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = sites.len();
        if rows.is_empty() {
            return Err(Error::Domain("latent field draws need at least one row".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Domain(format!("draw has {} values for {} sites", r.len(), d)));
            }
            values.extend(r);
        }
        Ok(Self {
            n_sites: d,
            values,
            acceptance_rates: vec![f64::NAN; d],
            proposal_scales: vec![f64::NAN; d],
            sites,
            burn_in: 0,
            thin: 1,
        })
    }

    pub(crate) fn from_flat(sites: Vec<Location>, values: Vec<f64>) -> Self {
        let d = sites.len();
        debug_assert!(d > 0 && values.len() % d == 0 && !values.is_empty());
        Self {
            n_sites: d,
            values,
            acceptance_rates: vec![f64::NAN; d],
            proposal_scales: vec![f64::NAN; d],
            sites,
            burn_in: 0,
            thin: 1,
        }
    }

    pub fn n_draws(&self) -> usize {
        self.values.len() / self.n_sites
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_sites..(i + 1) * self.n_sites]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_sites)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_sites + j]
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.n_draws() - 1)
    }

    /// Site-wise mean over draws.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.n_draws() as f64;
        let mut m = vec![0.0; self.n_sites];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Draws with rows reordered by `order`.
    pub fn permuted_rows(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.values = order.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        out
    }
}

/// Conditional distribution of the latent field at an unobserved target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrigingResult {
    pub cond_mean: f64,
    pub cond_var: f64,
}

/// Multivariate normal log-density of `field` under mean `m(s)` and
/// covariance `sigma2 c(,)`.
pub fn gp_log_density(
    mean: &MeanStructure,
    spec: &CovarianceSpec,
    field: &[f64],
    sites: &[Location],
) -> Result<f64> {
    if field.len() != sites.len() {
        return Err(Error::Domain(format!(
            "field has {} values for {} sites",
            field.len(),
            sites.len()
        )));
    }
    let m = mean.means(sites)?;
    let factor = CholeskyFactor::for_covariance(spec, covariance_matrix(spec, sites)?)?;
    let r = DVector::from_iterator(field.len(), field.iter().zip(&m).map(|(f, m)| f - m));
    Ok(mvn_log_density(&factor, &r))
}

pub(crate) fn mvn_log_density(factor: &CholeskyFactor, residual: &DVector<f64>) -> f64 {
    let d = residual.len() as f64;
    -0.5 * (d * LN_2PI + factor.log_det() + factor.quad_form(residual))
}

/// One draw of the latent field.
pub fn gp_simulate<R: Rng + ?Sized>(
    mean: &MeanStructure,
    spec: &CovarianceSpec,
    sites: &[Location],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = mean.means(sites)?;
    if spec.total_variance() == 0.0 {
        return Ok(m);
    }
    let factor = CholeskyFactor::for_covariance(spec, covariance_matrix(spec, sites)?)?;
    Ok(simulate_with_factor(&factor, &m, rng))
}

pub(crate) fn simulate_with_factor<R: Rng + ?Sized>(factor: &CholeskyFactor, m: &[f64], rng: &mut R) -> Vec<f64> {
    let z = DVector::from_iterator(m.len(), (0..m.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let x = factor.correlate(&z);
    m.iter().zip(x.iter()).map(|(a, b)| a + b).collect()
}

/// Kriging predictor with `Sigma_s` factorized once, reusable across
/// targets and across draws of the observed field.
#[derive(Debug, Clone)]
pub struct Kriger {
    mean: MeanStructure,
    spec: CovarianceSpec,
    sites: Vec<Location>,
    site_means: Vec<f64>,
    factor: Option<CholeskyFactor>,
}

/// Per-target weights `Sigma_s^{-1} Sigma_{s,s*}` and conditional variance.
#[derive(Debug, Clone)]
pub struct KrigingWeights {
    pub prior_mean: f64,
    pub weights: Vec<f64>,
    pub cond_var: f64,
}

impl KrigingWeights {
    pub fn cond_mean(&self, observed_field: &[f64], site_means: &[f64]) -> f64 {
        self.prior_mean
            + self
                .weights
                .iter()
                .zip(observed_field.iter().zip(site_means))
                .map(|(w, (f, m))| w * (f - m))
                .sum::<f64>()
    }
}

impl Kriger {
    pub fn new(mean: &MeanStructure, spec: &CovarianceSpec, sites: &[Location]) -> Result<Self> {
        let site_means = mean.means(sites)?;
        let factor = if spec.total_variance() == 0.0 {
            None
        } else {
            Some(CholeskyFactor::for_covariance(spec, covariance_matrix(spec, sites)?)?)
        };
        Ok(Self {
            mean: mean.clone(),
            spec: *spec,
            sites: sites.to_vec(),
            site_means,
            factor,
        })
    }

    pub fn site_means(&self) -> &[f64] {
        &self.site_means
    }

    pub fn weights(&self, target: &Location) -> Result<KrigingWeights> {
        let prior_mean = self.mean.mean_at(target)?;
        let prior_var = self.spec.total_variance();
        let Some(factor) = &self.factor else {
            return Ok(KrigingWeights {
                prior_mean,
                weights: vec![0.0; self.sites.len()],
                cond_var: 0.0,
            });
        };
        let k = DVector::from_iterator(
            self.sites.len(),
            self.sites.iter().map(|s| self.spec.cross_covariance(s, target)),
        );
        let w = factor.solve(&k);
        let cond_var = (prior_var - k.dot(&w)).max(0.0);
        Ok(KrigingWeights {
            prior_mean,
            weights: w.iter().cloned().collect(),
            cond_var,
        })
    }

    pub fn krige(&self, observed_field: &[f64], target: &Location) -> Result<KrigingResult> {
        if observed_field.len() != self.sites.len() {
            return Err(Error::Domain("observed field length does not match sites".into()));
        }
        let w = self.weights(target)?;
        Ok(KrigingResult {
            cond_mean: w.cond_mean(observed_field, &self.site_means),
            cond_var: w.cond_var,
        })
    }
}

/// Conditional mean and variance of the latent field at `target` given its
/// values at `sites`.
///
/// The target's own nugget is not shared with any observed site, so a target
/// at an observed location keeps a variance of order `tau^2`; with `tau = 0`
/// the predictor interpolates exactly.
pub fn krige(
    mean: &MeanStructure,
    spec: &CovarianceSpec,
    observed_field: &[f64],
    sites: &[Location],
    target: &Location,
) -> Result<KrigingResult> {
    Kriger::new(mean, spec, sites)?.krige(observed_field, target)
}

/// Covariance matrix of sites augmented by one target in the last position.
pub fn joint_covariance(spec: &CovarianceSpec, sites: &[Location], target: &Location) -> Result<DMatrix<f64>> {
    let mut all = sites.to_vec();
    all.push(*target);
    covariance_matrix(spec, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::SourceTag;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at(east: f64, north: f64) -> Location {
        Location::planar(east, north, 0.0, SourceTag::Field)
    }

    fn zero_mean() -> MeanStructure {
        MeanStructure::constant(vec![SourceTag::Field], 0.0)
    }

    #[test]
    fn univariate_density_at_mean() {
        let mean = MeanStructure::constant(vec![SourceTag::Field], 3.0);
        let spec = CovarianceSpec::new(2.0, 0.5, 10.0, 1.0).unwrap();
        let lp = gp_log_density(&mean, &spec, &[3.0], &[at(0.0, 0.0)]).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.25).ln();
        assert_relative_eq!(lp, expected, max_relative = 1e-13);
    }

    #[test]
    fn far_apart_sites_factorize() {
        let spec = CovarianceSpec::new(1.5, 0.0, 1.0, 1.0).unwrap();
        let sites = [at(0.0, 0.0), at(1e4, 0.0)];
        let field = [0.7, -1.1];
        let lp = gp_log_density(&zero_mean(), &spec, &field, &sites).unwrap();
        let uni = |x: f64| -0.5 * (2.0 * std::f64::consts::PI * 1.5).ln() - x * x / 3.0;
        assert_relative_eq!(lp, uni(0.7) + uni(-1.1), max_relative = 1e-8);
    }

    #[test]
    fn density_matches_dense_inverse() {
        let spec = CovarianceSpec::new(2.0, 0.3, 7.0, 1.3).unwrap();
        let sites = [at(0.0, 0.0), at(3.0, 4.0), at(-2.0, 6.0)];
        let mean = MeanStructure::new(vec![SourceTag::Field], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let field = [1.4, 0.2, 2.5];
        let lp = gp_log_density(&mean, &spec, &field, &sites).unwrap();
        let sigma = covariance_matrix(&spec, &sites).unwrap();
        let inv = sigma.clone().try_inverse().unwrap();
        let r = DVector::from_vec(field.iter().map(|f| f - 1.0).collect());
        let direct = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + sigma.determinant().ln() + (r.transpose() * &inv * &r)[(0, 0)]);
        assert!((lp - direct).abs() < 1e-10);
    }

    #[test]
    fn density_maximized_at_mean() {
        let spec = CovarianceSpec::new(1.0, 0.1, 5.0, 1.0).unwrap();
        let sites = [at(0.0, 0.0), at(2.0, 1.0)];
        let at_mean = gp_log_density(&zero_mean(), &spec, &[0.0, 0.0], &sites).unwrap();
        for f in [[0.1, 0.0], [0.0, -0.2], [0.05, 0.05]] {
            assert!(gp_log_density(&zero_mean(), &spec, &f, &sites).unwrap() < at_mean);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let spec = CovarianceSpec::new(1.0, 0.0, 5.0, 1.0).unwrap();
        assert!(gp_log_density(&zero_mean(), &spec, &[0.0], &[at(0.0, 0.0), at(1.0, 0.0)]).is_err());
    }

    #[test]
    fn degenerate_simulation_returns_mean() {
        let mean = MeanStructure::new(vec![SourceTag::Field], vec![2.0, 0.01, 0.0, 0.0]).unwrap();
        let spec = CovarianceSpec::new(0.0, 0.0, 5.0, 1.0).unwrap();
        let sites = [Location::planar(0.0, 0.0, 100.0, SourceTag::Field), at(1.0, 1.0)];
        let draw = gp_simulate(&mean, &spec, &sites, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(draw, mean.means(&sites).unwrap());
    }

    #[test]
    fn simulation_reproducible() {
        let spec = CovarianceSpec::new(1.0, 0.0, 5.0, 1.0).unwrap();
        let sites = [at(0.0, 0.0), at(1.0, 1.0)];
        let a = gp_simulate(&zero_mean(), &spec, &sites, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gp_simulate(&zero_mean(), &spec, &sites, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_covariance_converges() {
        let spec = CovarianceSpec::new(2.0, 0.2, 6.0, 1.5).unwrap();
        let sites = [at(0.0, 0.0), at(3.0, 0.0), at(0.0, 5.0), at(8.0, 8.0)];
        let truth = covariance_matrix(&spec, &sites).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut acc = DMatrix::<f64>::zeros(4, 4);
        let mut sq = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            let x = gp_simulate(&zero_mean(), &spec, &sites, &mut rng).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let p = x[i] * x[j];
                    acc[(i, j)] += p;
                    sq[(i, j)] += p * p;
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let m = acc[(i, j)] / n as f64;
                let var = sq[(i, j)] / n as f64 - m * m;
                let se = (var / n as f64).sqrt();
                assert!((m - truth[(i, j)]).abs() < 3.0 * se, "({i},{j}) {m} vs {}", truth[(i, j)]);
            }
        }
    }

    #[test]
    fn independent_target_returns_prior() {
        let mean = MeanStructure::constant(vec![SourceTag::Field], 5.0);
        let spec = CovarianceSpec::new(2.0, 0.0, 1.0, 1.0).unwrap();
        let k = krige(&mean, &spec, &[9.0], &[at(0.0, 0.0)], &at(1e5, 0.0)).unwrap();
        assert_relative_eq!(k.cond_mean, 5.0, epsilon = 1e-12);
        assert_relative_eq!(k.cond_var, 2.0, epsilon = 1e-12);
        let nugget = CovarianceSpec::new(2.0, 0.5, 1.0, 1.0).unwrap();
        let k = krige(&mean, &nugget, &[9.0], &[at(0.0, 0.0)], &at(1e5, 0.0)).unwrap();
        assert_relative_eq!(k.cond_var, 2.25, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_normal_conditioning() {
        let spec = CovarianceSpec::new(1.0, 0.0, 4.0, 1.0).unwrap();
        let target = at(3.0, 0.0);
        let r = (-0.75f64).exp();
        let v = 1.7;
        let k = krige(&zero_mean(), &spec, &[v], &[at(0.0, 0.0)], &target).unwrap();
        assert_relative_eq!(k.cond_mean, r * v, max_relative = 1e-8);
        assert_relative_eq!(k.cond_var, 1.0 - r * r, max_relative = 1e-8);
    }

    #[test]
    fn exact_interpolation_without_nugget() {
        let spec = CovarianceSpec::new(1.0, 0.0, 5.0, 1.5).unwrap();
        let sites = [at(0.0, 0.0), at(3.0, 1.0), at(-1.0, 4.0)];
        let field = [0.3, -0.8, 1.2];
        for (j, s) in sites.iter().enumerate() {
            let k = krige(&zero_mean(), &spec, &field, &sites, s).unwrap();
            assert!((k.cond_mean - field[j]).abs() < 1e-8);
            assert!(k.cond_var < 1e-10);
        }
    }

    #[test]
    fn variance_non_increasing_with_nested_sites() {
        let spec = CovarianceSpec::new(1.0, 0.1, 5.0, 1.0).unwrap();
        let all = [at(0.0, 0.0), at(4.0, 0.0), at(0.0, 3.0), at(6.0, 6.0), at(2.0, 2.0)];
        let target = at(1.0, 1.0);
        let mut last = f64::INFINITY;
        for n in 1..=all.len() {
            let field = vec![0.0; n];
            let k = krige(&zero_mean(), &spec, &field, &all[..n], &target).unwrap();
            assert!(k.cond_var <= last + 1e-12);
            assert!(k.cond_var <= spec.total_variance());
            last = k.cond_var;
        }
    }
}
