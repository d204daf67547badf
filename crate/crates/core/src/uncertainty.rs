//! Parameter uncertainty: the Monte Carlo sandwich estimator for the
//! data-layer parameters and observed Fisher information for the process
//! layer.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::standard_terms;
use crate::gp::LatentFieldDraws;
use crate::linalg::{condition_estimate, invert_symmetric, symmetrize, CholeskyFactor};
use crate::mcem::{cov_from_unconstrained, cov_to_unconstrained, covariance_derivatives, DrawMoments};
use crate::model::{DataLayerParams, JointDataset, ProcessLayerParams};
use crate::spatial::{covariance_matrix, Location, SourceTag};

/// How score contributions are grouped before forming outer products in
/// the sandwich meat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreClustering {
    /// One term per draw, site and year.
    #[default]
    Observation,
    /// Scores summed over sites within a year, one term per draw and year.
    Year,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMatrices {
    pub theta1_names: Vec<String>,
    pub j: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub sandwich_cov: DMatrix<f64>,
    /// `(-H)^-1`, the covariance that ignores misspecification.
    pub naive_cov: DMatrix<f64>,
    pub theta2_names: Vec<String>,
    /// Covariance of `(beta, sigma2, phi, delta[, tau])`; zero rows and
    /// columns for the parameters in `theta2_held`.
    pub fisher_cov_theta2: DMatrix<f64>,
    /// Process-layer parameters without a Fisher standard error.
    #[serde(default)]
    pub theta2_held: Vec<String>,
}

impl InfoMatrices {
    pub fn sandwich_se(&self) -> Vec<f64> {
        self.sandwich_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn naive_se(&self) -> Vec<f64> {
        self.naive_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Louis-adjusted matrices: the missing information `m` is removed
    /// from the complete-data information before inverting, so
    /// `-H` becomes `-H - m` in both the sandwich and the naive covariance.
    pub fn with_missing_information(&self, m: &DMatrix<f64>) -> Result<InfoMatrices> {
        let h = symmetrize(&(&self.h + m));
        let h_inv = invert_symmetric(&h, "Louis-adjusted Hessian")?;
        Ok(InfoMatrices {
            sandwich_cov: symmetrize(&(&h_inv * &self.j * &h_inv)),
            naive_cov: -h_inv,
            h,
            ..self.clone()
        })
    }
}

/// Across-draw covariance of the per-draw total data-layer score, the
/// missing information about `theta1` carried by the latent field.
pub fn missing_information(data: &JointDataset, draws: &LatentFieldDraws, theta1: &DataLayerParams) -> Result<DMatrix<f64>> {
    let sites = site_table(data, draws, theta1)?;
    let theta = theta1.to_vec();
    let p = theta.len();
    let n = draws.n_draws();
    let mut scores = DMatrix::<f64>::zeros(p, n);
    for i in 0..n {
        for s in &sites {
            let mu = s.column[i];
            for &x in &s.obs {
                let sc = site_score(&theta, s, x, mu)
                    .ok_or_else(|| Error::Domain("observation outside the GEV support".into()))?;
                for a in 0..3 {
                    scores[(s.offset + a, i)] += sc[a];
                }
            }
        }
    }
    let mean = scores.column_mean();
    for mut c in scores.column_iter_mut() {
        c -= &mean;
    }
    Ok(symmetrize(&(&scores * scores.transpose() / n as f64)))
}

/// Gradient of one observation's log density in the flattened data-layer
/// parameters.
pub fn score_contribution(theta1: &DataLayerParams, x: f64, mu: f64, site: &Location) -> Result<DVector<f64>> {
    let sources = theta1.sources();
    let k = sources
        .iter()
        .position(|s| *s == site.source)
        .ok_or_else(|| Error::Domain(format!("no data-layer parameters for source {}", site.source)))?;
    let p = theta1.source_params(site.source)?;
    let psi = p.psi_at(site.elevation);
    let (_, g) = standard_terms((x - mu) / psi, p.xi)
        .ok_or_else(|| Error::Domain(format!("observation {x} outside the GEV support")))?;
    let mut out = DVector::zeros(3 * sources.len());
    out[3 * k] = g[0];
    out[3 * k + 1] = g[0] * site.elevation;
    out[3 * k + 2] = g[1];
    Ok(out)
}

struct Site<'a> {
    years: Vec<i32>,
    obs: Vec<f64>,
    elevation: f64,
    offset: usize,
    column: Vec<f64>,
    _loc: &'a Location,
}

fn site_table<'a>(data: &'a JointDataset, draws: &LatentFieldDraws, theta1: &DataLayerParams) -> Result<Vec<Site<'a>>> {
    if draws.n_draws() == 0 || draws.n_sites() != data.n_sites() {
        return Err(Error::Dataset("draws do not match the dataset".into()));
    }
    let sources = theta1.sources();
    data.records()
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let loc = &r.site.location;
            let k = sources
                .iter()
                .position(|s| *s == loc.source)
                .ok_or_else(|| Error::Domain(format!("no data-layer parameters for source {}", loc.source)))?;
            Ok(Site {
                years: r.maxima.iter().map(|m| m.year).collect(),
                obs: r.values().collect(),
                elevation: loc.elevation,
                offset: 3 * k,
                column: draws.column(j),
                _loc: loc,
            })
        })
        .collect()
}

fn weighted(column: &[f64]) -> Vec<(f64, f64)> {
    let mut col = column.to_vec();
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

fn site_score(theta: &[f64], s: &Site, x: f64, mu: f64) -> Option<[f64; 3]> {
    let o = s.offset;
    let psi = (theta[o] + theta[o + 1] * s.elevation).exp();
    let (_, g) = standard_terms((x - mu) / psi, theta[o + 2])?;
    Some([g[0], g[0] * s.elevation, g[1]])
}

/// Monte Carlo total score `(1/N) sum_i sum_j sum_t j(theta; x, mu_i)`.
fn total_score(theta: &[f64], sites: &[Site], weights: &[Vec<(f64, f64)>]) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(theta.len());
    for (s, w) in sites.iter().zip(weights) {
        let mut acc = [0.0; 3];
        for &(mu, wt) in w {
            for &x in &s.obs {
                let sc = site_score(theta, s, x, mu)
                    .ok_or_else(|| Error::Domain("observation outside the GEV support".into()))?;
                for k in 0..3 {
                    acc[k] += wt * sc[k];
                }
            }
        }
        for k in 0..3 {
            g[s.offset + k] += acc[k];
        }
    }
    Ok(g)
}

/// Sandwich covariance `H^-1 J H^-1` of the data-layer parameters.
pub fn sandwich_covariance(
    data: &JointDataset,
    draws: &LatentFieldDraws,
    theta1: &DataLayerParams,
    clustering: ScoreClustering,
) -> Result<InfoMatrices> {
    let sites = site_table(data, draws, theta1)?;
    let theta = theta1.to_vec();
    let p = theta.len();
    let weights: Vec<Vec<(f64, f64)>> = sites.iter().map(|s| weighted(&s.column)).collect();

    let mut j = DMatrix::zeros(p, p);
    match clustering {
        ScoreClustering::Observation => {
            for (s, w) in sites.iter().zip(&weights) {
                let mut block = [[0.0; 3]; 3];
                for &(mu, wt) in w {
                    for &x in &s.obs {
                        let sc = site_score(&theta, s, x, mu)
                            .ok_or_else(|| Error::Domain("observation outside the GEV support".into()))?;
                        for a in 0..3 {
                            for b in 0..3 {
                                block[a][b] += wt * sc[a] * sc[b];
                            }
                        }
                    }
                }
                for a in 0..3 {
                    for b in 0..3 {
                        j[(s.offset + a, s.offset + b)] += block[a][b];
                    }
                }
            }
        }
        ScoreClustering::Year => {
            let n = draws.n_draws();
            let mut year_index = BTreeMap::new();
            for s in &sites {
                for y in &s.years {
                    let len = year_index.len();
                    year_index.entry(*y).or_insert(len);
                }
            }
            let mut sums = DMatrix::<f64>::zeros(p, year_index.len());
            for i in 0..n {
                sums.fill(0.0);
                for s in &sites {
                    let mu = s.column[i];
                    for (x, y) in s.obs.iter().zip(&s.years) {
                        let sc = site_score(&theta, s, *x, mu)
                            .ok_or_else(|| Error::Domain("observation outside the GEV support".into()))?;
                        let c = year_index[y];
                        for a in 0..3 {
                            sums[(s.offset + a, c)] += sc[a];
                        }
                    }
                }
                j.gemm(1.0 / n as f64, &sums, &sums.transpose(), 1.0);
            }
        }
    }
    let j = symmetrize(&j);

    let mut h = DMatrix::zeros(p, p);
    for k in 0..p {
        let step = 1e-5 * theta[k].abs().max(1.0);
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += step;
        tm[k] -= step;
        let gp = total_score(&tp, &sites, &weights)?;
        let gm = total_score(&tm, &sites, &weights)?;
        h.set_column(k, &((gp - gm) / (2.0 * step)));
    }
    let h = symmetrize(&h);
    let h_inv = invert_symmetric(&h, "data-layer Hessian")?;
    let sandwich_cov = symmetrize(&(&h_inv * &j * &h_inv));
    let naive_cov = -h_inv;
    Ok(InfoMatrices {
        theta1_names: theta1.names(),
        j,
        h,
        sandwich_cov,
        naive_cov,
        theta2_names: Vec::new(),
        fisher_cov_theta2: DMatrix::zeros(0, 0),
        theta2_held: Vec::new(),
    })
}

/// Gradient of the Monte Carlo process-layer objective in
/// `(beta, unconstrained covariance coordinates)`.
fn process_gradient(
    moments: &DrawMoments,
    design: &DMatrix<f64>,
    sites: &[Location],
    params: &[f64],
    n_beta: usize,
    fixed_tau: f64,
) -> Result<DVector<f64>> {
    let beta = DVector::from_column_slice(&params[..n_beta]);
    let u = &params[n_beta..];
    let tau_free = u.len() > 3;
    let spec = cov_from_unconstrained(u, fixed_tau)?;
    let f = CholeskyFactor::for_covariance(&spec, covariance_matrix(&spec, sites)?)?;
    let r = &moments.mean - design * &beta;
    let sinv = f.inverse();
    let alpha = &sinv * &r;
    let m = &moments.scatter + &r * r.transpose();
    let sinv_m_sinv = &sinv * &m * &sinv;
    let mut g = DVector::zeros(params.len());
    let gb = design.transpose() * &alpha;
    for k in 0..n_beta {
        g[k] = gb[k];
    }
    for (k, dk) in covariance_derivatives(&spec, sites, tau_free).iter().enumerate() {
        let t1 = sinv.component_mul(dk).sum();
        let t2 = sinv_m_sinv.component_mul(dk).sum();
        g[n_beta + k] = -0.5 * t1 + 0.5 * t2;
    }
    Ok(g)
}

/// Inverse negative Hessian of the Monte Carlo process-layer
/// log-likelihood, in natural coordinates `(beta, sigma2, phi, delta[, tau])`.
///
/// With `hold_covariance_fixed` only the mean coefficients are treated as
/// free and the result is `(X' S^-1 X)^-1`.
///
/// Covariance coordinates on the boundary of their range, or with a
/// likelihood too flat to invert, are held fixed: their rows and columns
/// are zero and their names are returned alongside.
pub fn fisher_covariance_theta2(
    draws: &LatentFieldDraws,
    sites: &[Location],
    theta2: &ProcessLayerParams,
    hold_covariance_fixed: bool,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    if draws.n_draws() == 0 || draws.n_sites() != sites.len() {
        return Err(Error::Dataset("draws do not match the sites".into()));
    }
    if theta2.cov.sigma2() == 0.0 {
        return Err(Error::Degenerate("process-layer information undefined with sigma2 = 0".into()));
    }
    let design = theta2.mean.design_matrix(sites)?;
    let n_beta = design.ncols();
    let names = theta2_names(theta2);
    let tau_free = !theta2.tau_fixed;
    let p = n_beta + 3 + usize::from(tau_free);
    if hold_covariance_fixed {
        let f = CholeskyFactor::for_covariance(&theta2.cov, covariance_matrix(&theta2.cov, sites)?)?;
        let info = design.transpose() * f.solve_matrix(&design);
        let cov_b = invert_symmetric(&info, "GLS information")?;
        let mut out = DMatrix::zeros(p, p);
        out.view_mut((0, 0), (n_beta, n_beta)).copy_from(&cov_b);
        return Ok((out, names[n_beta..].to_vec()));
    }
    let moments = DrawMoments::new(draws);
    let mut params: Vec<f64> = theta2.mean.coefficients().to_vec();
    params.extend(cov_to_unconstrained(&theta2.cov, tau_free));
    let mut keep: Vec<bool> = vec![true; p];
    for k in n_beta..p {
        if !params[k].is_finite() || (k == n_beta + 2 && params[k].abs() > BOUNDARY_LOGIT) {
            keep[k] = false;
            params[k] = params[k].clamp(-BOUNDARY_LOGIT, BOUNDARY_LOGIT);
        }
    }
    let fixed_tau = theta2.cov.tau();
    let mut h = DMatrix::zeros(p, p);
    for k in 0..p {
        let step = 1e-5 * params[k].abs().max(1.0);
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp[k] += step;
        pm[k] -= step;
        let gp = process_gradient(&moments, &design, sites, &pp, n_beta, fixed_tau)?;
        let gm = process_gradient(&moments, &design, sites, &pm, n_beta, fixed_tau)?;
        h.set_column(k, &((gp - gm) / (2.0 * step)));
    }
    let neg_h = -symmetrize(&h);
    let (s2, phi, delta, tau) = (theta2.cov.sigma2(), theta2.cov.phi(), theta2.cov.delta(), theta2.cov.tau());
    let mut jac = vec![1.0; n_beta];
    jac.extend([s2, phi, delta * (1.0 - delta / 2.0)]);
    if tau_free {
        jac.push(tau);
    }
    loop {
        let idx: Vec<usize> = (0..p).filter(|k| keep[*k]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| neg_h[(idx[a], idx[b])]);
        let attempt = invert_symmetric(&sub, "process-layer Hessian")
            .ok()
            .filter(|c| c.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()));
        if let Some(cov_u) = attempt {
            let mut out = DMatrix::zeros(p, p);
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    out[(i, j)] = jac[i] * cov_u[(a, b)] * jac[j];
                }
            }
            let held = (0..p).filter(|k| !keep[*k]).map(|k| names[k].clone()).collect();
            return Ok((symmetrize(&out), held));
        }
        let weakest = (n_beta..p)
            .filter(|k| keep[*k])
            .min_by(|a, b| neg_h[(*a, *a)].total_cmp(&neg_h[(*b, *b)]));
        match weakest {
            Some(k) => keep[k] = false,
            None => {
                return Err(Error::Singular {
                    context: "process-layer Hessian is not negative definite".into(),
                    condition: condition_estimate(&neg_h),
                })
            }
        }
    }
}

/// `|logit(delta / 2)|` beyond which `delta` counts as on its boundary.
const BOUNDARY_LOGIT: f64 = 15.0;

/// Names of the rows of [`fisher_covariance_theta2`].
pub fn theta2_names(theta2: &ProcessLayerParams) -> Vec<String> {
    let mut names = theta2.mean.names();
    names.extend(["sigma2".to_string(), "phi".into(), "delta".into()]);
    if !theta2.tau_fixed {
        names.push("tau".into());
    }
    names
}

/// Standard errors in reporting units; `sigma_mu` by the delta method and
/// `None` for a fixed nugget or a parameter held in the information matrix.
pub fn theta2_standard_errors(theta2: &ProcessLayerParams, cov: &DMatrix<f64>) -> Vec<(String, Option<f64>)> {
    let n_beta = theta2.mean.n_coefficients();
    let se = |k: usize| cov.get((k, k)).filter(|v| **v > 0.0).map(|v| v.sqrt());
    let mut out: Vec<(String, Option<f64>)> = theta2.mean.names().into_iter().enumerate().map(|(k, n)| (n, se(k))).collect();
    let sigma = theta2.cov.sigma2().sqrt();
    out.push(("sigma_mu".into(), se(n_beta).map(|s| s / (2.0 * sigma))));
    out.push(("phi".into(), se(n_beta + 1)));
    out.push(("delta".into(), se(n_beta + 2)));
    out.push(("tau".into(), if theta2.tau_fixed { None } else { se(n_beta + 3) }));
    out
}

/// Sources in parameter-vector order.
pub fn theta1_sources(theta1: &DataLayerParams) -> Vec<SourceTag> {
    theta1.sources()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gev::GevParams;
    use crate::model::{AnnualMax, MeanStructure, Site, SiteRecord, SourceParams};
    use crate::spatial::CovarianceSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta1() -> DataLayerParams {
        DataLayerParams {
            field: Some(SourceParams {
                psi0: 1.8,
                psi1: 0.001,
                xi: 0.1,
            }),
            simulator: Some(SourceParams {
                psi0: 1.6,
                psi1: 0.0005,
                xi: -0.05,
            }),
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = theta1();
        for _ in 0..100 {
            let source = if rng.random::<bool>() { SourceTag::Field } else { SourceTag::Simulator };
            let site = Location::planar(0.0, 0.0, rng.random_range(0.0..800.0), source);
            let mu = rng.random_range(20.0..40.0);
            let g = t.gev_at(&site, mu).unwrap();
            let x = g.sample(1, &mut rng).unwrap()[0];
            let s = score_contribution(&t, x, mu, &site).unwrap();
            let v = t.to_vec();
            let logf = |v: &[f64]| {
                let tt = DataLayerParams::from_vec(&t.sources(), v).unwrap();
                tt.gev_at(&site, mu).unwrap().log_density(x)
            };
            for k in 0..v.len() {
                let h = 1e-6 * v[k].abs().max(1e-3);
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[k] += h;
                vm[k] -= h;
                let fd = (logf(&vp) - logf(&vm)) / (2.0 * h);
                assert!((fd - s[k]).abs() <= 1e-6 * fd.abs().max(1.0), "k={k}: {fd} vs {}", s[k]);
            }
        }
    }

    #[test]
    fn shape_score_continuous_at_zero() {
        let site = Location::planar(0.0, 0.0, 0.0, SourceTag::Field);
        let make = |xi| DataLayerParams {
            field: Some(SourceParams { psi0: 1.0, psi1: 0.0, xi }),
            simulator: None,
        };
        for x in [5.0, 10.0, 20.0] {
            let a = score_contribution(&make(1e-6), x, 10.0, &site).unwrap();
            let b = score_contribution(&make(-1e-6), x, 10.0, &site).unwrap();
            assert!((a[2] - b[2]).abs() < 1e-4 * (1.0 + a[2].abs()));
        }
    }

    fn iid_dataset(n: usize, seed: u64) -> (JointDataset, LatentFieldDraws) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loc = Location::planar(0.0, 0.0, 0.0, SourceTag::Field);
        let values = GevParams::new(30.0, 6.0, 0.1).unwrap().sample(n, &mut rng).unwrap();
        let data = JointDataset::new(vec![SiteRecord {
            site: Site {
                id: "a".into(),
                location: loc,
            },
            maxima: values.into_iter().enumerate().map(|(t, value)| AnnualMax { year: t as i32, value }).collect(),
        }])
        .unwrap();
        let draws = LatentFieldDraws::from_rows(data.locations(), vec![vec![30.0]]).unwrap();
        (data, draws)
    }

    #[test]
    fn summed_score_vanishes_at_ml_point() {
        let (data, draws) = iid_dataset(5000, 3);
        let start = DataLayerParams {
            field: Some(SourceParams { psi0: 1.5, psi1: 0.0, xi: 0.0 }),
            simulator: None,
        };
        let est = crate::mcem::m_step_theta1(&data, &draws, &start, 100).unwrap();
        let mut sum_score = DVector::zeros(3);
        for x in data.records()[0].values() {
            sum_score += score_contribution(&est, x, 30.0, &data.locations()[0]).unwrap();
        }
        assert!(sum_score.amax() / 5000.0 < 1e-7, "{sum_score}");
        // elevation is constant at one site, so the Hessian is singular
        assert!(matches!(
            sandwich_covariance(&data, &draws, &est, ScoreClustering::Observation),
            Err(Error::Singular { .. })
        ));
    }

    /// Sites at elevations 0, 0, 500, 500; with `paired`, sites in each
    /// elevation pair share the uniform layer every year.
    fn paired_dataset(n: usize, seed: u64, paired: bool) -> (JointDataset, LatentFieldDraws, DataLayerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = DataLayerParams {
            field: Some(SourceParams { psi0: 1.8, psi1: 0.001, xi: 0.1 }),
            simulator: None,
        };
        let locs = [
            Location::planar(0.0, 0.0, 0.0, SourceTag::Field),
            Location::planar(1.0, 0.0, 0.0, SourceTag::Field),
            Location::planar(2.0, 0.0, 500.0, SourceTag::Field),
            Location::planar(3.0, 0.0, 500.0, SourceTag::Field),
        ];
        let mut uniforms = vec![vec![0.0; n]; 4];
        for i in 0..n {
            for j in 0..4 {
                uniforms[j][i] = if paired && j % 2 == 1 { uniforms[j - 1][i] } else { rng.random_range(1e-12..1.0) };
            }
        }
        let recs = locs
            .iter()
            .enumerate()
            .map(|(j, loc)| {
                let g = t.gev_at(loc, 30.0).unwrap();
                SiteRecord {
                    site: Site {
                        id: format!("s{j}"),
                        location: *loc,
                    },
                    maxima: uniforms[j]
                        .iter()
                        .enumerate()
                        .map(|(y, &u)| AnnualMax {
                            year: y as i32,
                            value: g.quantile(u).unwrap(),
                        })
                        .collect(),
                }
            })
            .collect();
        let data = JointDataset::new(recs).unwrap();
        let draws = LatentFieldDraws::from_rows(data.locations(), vec![vec![30.0; 4]]).unwrap();
        let est = crate::mcem::m_step_theta1(&data, &draws, &t, 100).unwrap();
        (data, draws, est)
    }

    #[test]
    fn sandwich_within_fifteen_percent_of_fisher_iid() {
        let (data, draws, est) = paired_dataset(5000, 4, false);
        for clustering in [ScoreClustering::Observation, ScoreClustering::Year] {
            let info = sandwich_covariance(&data, &draws, &est, clustering).unwrap();
            for (a, b) in info.sandwich_se().iter().zip(info.naive_se()) {
                assert!((a / b - 1.0).abs() < 0.15, "{clustering:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn year_clustered_sandwich_exceeds_naive_under_dependence() {
        let (data, draws, est) = paired_dataset(2000, 5, true);
        let info = sandwich_covariance(&data, &draws, &est, ScoreClustering::Year).unwrap();
        let s = info.sandwich_se();
        let n = info.naive_se();
        assert!(s[0] > 1.2 * n[0], "intercept {} vs {}", s[0], n[0]);
        // the per-observation meat cannot see dependence between sites
        let flat = sandwich_covariance(&data, &draws, &est, ScoreClustering::Observation).unwrap();
        assert!((flat.sandwich_se()[0] / n[0] - 1.0).abs() < 0.15);
    }

    #[test]
    fn draw_order_does_not_matter() {
        let (data, _, est) = paired_dataset(200, 6, false);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![29.0 + 0.1 * i as f64, 31.0 - 0.07 * i as f64, 30.0, 29.5 + 0.01 * i as f64])
            .collect();
        let mut rev = rows.clone();
        rev.reverse();
        let a = LatentFieldDraws::from_rows(data.locations(), rows).unwrap();
        let b = LatentFieldDraws::from_rows(data.locations(), rev).unwrap();
        let ia = sandwich_covariance(&data, &a, &est, ScoreClustering::Observation).unwrap();
        let ib = sandwich_covariance(&data, &b, &est, ScoreClustering::Observation).unwrap();
        assert!((&ia.j - &ib.j).amax() < 1e-12 * ia.j.amax());
        assert!((&ia.h - &ib.h).amax() < 1e-12 * ia.h.amax());
    }

    #[test]
    fn missing_information_vanishes_for_fixed_field_and_widens_intervals() {
        let (data, fixed, est) = paired_dataset(300, 7, false);
        assert!(missing_information(&data, &fixed, &est).unwrap().amax() == 0.0);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| (0..4).map(|j| 30.0 + 0.5 * (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0).collect())
            .collect();
        let draws = LatentFieldDraws::from_rows(data.locations(), rows).unwrap();
        let m = missing_information(&data, &draws, &est).unwrap();
        assert!(m.clone().symmetric_eigenvalues().min() > -1e-9 * m.amax());
        let info = sandwich_covariance(&data, &draws, &est, ScoreClustering::Observation).unwrap();
        let louis = info.with_missing_information(&m).unwrap();
        for (a, b) in louis.naive_se().iter().zip(info.naive_se()) {
            assert!(*a >= b * (1.0 - 1e-9), "{a} vs {b}");
        }
    }

    #[test]
    fn gls_block_when_covariance_fixed() {
        let sites: Vec<Location> = (0..10)
            .map(|i| Location::planar(9.0 * i as f64, 4.0 * (i % 3) as f64, 30.0 * ((i * 7) % 10) as f64, SourceTag::Field))
            .collect();
        let theta2 = ProcessLayerParams {
            mean: MeanStructure::new(vec![SourceTag::Field], vec![40.0, 0.03, -0.3, -0.25]).unwrap(),
            cov: CovarianceSpec::new(4.0, 0.0, 20.0, 1.0).unwrap(),
            tau_fixed: true,
        };
        let draws = LatentFieldDraws::from_rows(sites.clone(), vec![vec![30.0; 10]; 3]).unwrap();
        let (full, held) = fisher_covariance_theta2(&draws, &sites, &theta2, true).unwrap();
        assert_eq!(held, vec!["sigma2", "phi", "delta"]);
        let c = full.view((0, 0), (4, 4)).into_owned();
        let x = theta2.mean.design_matrix(&sites).unwrap();
        let sigma = covariance_matrix(&theta2.cov, &sites).unwrap();
        let oracle = (x.transpose() * sigma.try_inverse().unwrap() * &x).try_inverse().unwrap();
        assert!((&c - &oracle).amax() < 1e-6 * oracle.amax());
    }

    #[test]
    fn fisher_diagonal_positive_for_gp_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sites: Vec<Location> = (0..15)
            .map(|i| Location::planar(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), 10.0 * i as f64, SourceTag::Field))
            .collect();
        let theta2 = ProcessLayerParams {
            mean: MeanStructure::new(vec![SourceTag::Field], vec![40.0, 0.03, -0.3, -0.25]).unwrap(),
            cov: CovarianceSpec::new(4.0, 0.0, 30.0, 1.0).unwrap(),
            tau_fixed: true,
        };
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| crate::gp::gp_simulate(&theta2.mean, &theta2.cov, &sites, &mut rng).unwrap())
            .collect();
        let draws = LatentFieldDraws::from_rows(sites.clone(), rows).unwrap();
        let est = crate::mcem::m_step_theta2(&draws, &sites, &theta2, 1).unwrap();
        let c = fisher_covariance_theta2(&draws, &sites, &est, false).unwrap().0;
        assert!(c.diagonal().iter().all(|v| *v > 0.0));
        let se = theta2_standard_errors(&est, &c);
        assert_eq!(se.last().unwrap().1, None);

        let edge = ProcessLayerParams {
            cov: CovarianceSpec::new(est.cov.sigma2(), 0.0, est.cov.phi(), 2.0).unwrap(),
            ..est.clone()
        };
        let (c, held) = fisher_covariance_theta2(&draws, &sites, &edge, false).unwrap();
        assert!(held.contains(&"delta".to_string()));
        let se = theta2_standard_errors(&edge, &c);
        assert!(se.iter().find(|(n, _)| n == "delta").unwrap().1.is_none());
        assert!(se.iter().take(4).all(|(_, v)| v.is_some()));
    }
}
