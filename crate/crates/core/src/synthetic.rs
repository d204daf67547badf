//! Synthetic datasets drawn from known parameters, with and without the
//! conditional independence of maxima given the latent field.

use chrono::{Days, NaiveDate};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gev::GevParams;
use crate::gp::{gp_simulate, simulate_with_factor};
use crate::ingest::{DailyRecord, DailySeries};
use crate::linalg::CholeskyFactor;
use crate::model::{AnnualMax, DataLayerParams, JointDataset, MeanStructure, ProcessLayerParams, Site, SiteRecord, SourceParams};
use crate::spatial::{centroid, CovarianceSpec, Location, SourceTag};

/// First simulated year.
pub const FIRST_YEAR: i32 = 1950;

/// Parameters used by the examples and tests as a plausible truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub theta1: DataLayerParams,
    pub theta2: ProcessLayerParams,
}

impl WorldParams {
    pub fn reference() -> Self {
        let theta1 = DataLayerParams {
            field: Some(SourceParams {
                psi0: 2.0,
                psi1: 0.0008,
                xi: 0.1,
            }),
            simulator: Some(SourceParams {
                psi0: 1.8,
                psi1: 0.001,
                xi: 0.05,
            }),
        };
        let mean = MeanStructure::new(
            vec![SourceTag::Field, SourceTag::Simulator],
            vec![40.0, 0.03, -0.3, -0.25, 35.0, 0.02, -0.2, -0.2],
        )
        .expect("eight coefficients for two sources");
        let theta2 = ProcessLayerParams {
            mean,
            cov: CovarianceSpec::new(9.0, 0.0, 40.0, 1.5).expect("valid covariance"),
            tau_fixed: true,
        };
        Self { theta1, theta2 }
    }

    /// Restricts the parameters to the sources present in `sites`.
    pub fn for_sites(&self, sites: &[Site]) -> Result<Self> {
        let present: Vec<SourceTag> = SourceTag::ALL
            .into_iter()
            .filter(|s| sites.iter().any(|x| x.location.source == *s))
            .collect();
        let mut theta1 = DataLayerParams {
            field: None,
            simulator: None,
        };
        let mut coefs = Vec::new();
        for s in &present {
            theta1.set(*s, *self.theta1.source_params(*s)?);
            let k = self
                .theta2
                .mean
                .sources()
                .iter()
                .position(|t| t == s)
                .ok_or_else(|| Error::Domain(format!("no mean coefficients for source {s}")))?;
            coefs.extend_from_slice(&self.theta2.mean.coefficients()[4 * k..4 * k + 4]);
        }
        let theta2 = ProcessLayerParams {
            mean: MeanStructure::new(present, coefs)?,
            ..self.theta2.clone()
        };
        Ok(Self { theta1, theta2 })
    }
}

/// Random site layout in a square of side `extent_km` centred on
/// [`crate::spatial::DEFAULT_ORIGIN`], projected about the layout's own centroid. Elevation
/// is a smooth ridge plus noise, between 0 and about 600 m.
pub fn random_sites<R: Rng + ?Sized>(n_field: usize, n_simulator: usize, extent_km: f64, rng: &mut R) -> Result<Vec<Site>> {
    let mut planar = Vec::with_capacity(n_field + n_simulator);
    for i in 0..n_field + n_simulator {
        let source = if i < n_field { SourceTag::Field } else { SourceTag::Simulator };
        let e = rng.random_range(-0.5..0.5) * extent_km;
        let n = rng.random_range(-0.5..0.5) * extent_km;
        let ridge = 300.0 * (1.0 + (e / extent_km * std::f64::consts::PI * 2.0).sin() * (n / extent_km * 3.0).cos());
        let elevation = (ridge + rng.random_range(-50.0..50.0)).max(0.0).round();
        planar.push(Location::planar(e, n, elevation, source));
    }
    for l in &mut planar {
        l.lon = round6(l.lon);
        l.lat = round6(l.lat);
    }
    let origin = centroid(planar.iter().map(|l| (l.lon, l.lat)));
    planar
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let id = match l.source {
                SourceTag::Field => format!("F{:03}", i + 1),
                SourceTag::Simulator => format!("M{:03}", i + 1 - n_field),
            };
            Ok(Site {
                id,
                location: Location::geographic(l.lon, l.lat, l.elevation, l.source, origin)?,
            })
        })
        .collect()
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn check_inputs(sites: &[Site], years: usize) -> Result<()> {
    if sites.is_empty() {
        return Err(Error::Domain("no sites to simulate".into()));
    }
    if years == 0 {
        return Err(Error::Domain("need at least one year".into()));
    }
    Ok(())
}

fn assemble(sites: &[Site], values: Vec<Vec<f64>>) -> Result<JointDataset> {
    let records = sites
        .iter()
        .zip(values)
        .map(|(s, v)| SiteRecord {
            site: s.clone(),
            maxima: v
                .into_iter()
                .enumerate()
                .map(|(t, value)| AnnualMax {
                    year: FIRST_YEAR + t as i32,
                    value,
                })
                .collect(),
        })
        .collect();
    JointDataset::from_geographic(records)
}

/// Latent field draw followed by independent GEV maxima per site and year.
/// Returns the dataset together with the latent field.
pub fn simulate_world_with_field<R: Rng + ?Sized>(
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    sites: &[Site],
    years: usize,
    rng: &mut R,
) -> Result<(JointDataset, Vec<f64>)> {
    check_inputs(sites, years)?;
    let locs: Vec<Location> = sites.iter().map(|s| s.location).collect();
    let mu = gp_simulate(&theta2.mean, &theta2.cov, &locs, rng)?;
    let gevs: Vec<GevParams> = locs
        .iter()
        .zip(&mu)
        .map(|(l, m)| theta1.gev_at(l, *m))
        .collect::<Result<_>>()?;
    let mut values = vec![Vec::with_capacity(years); sites.len()];
    for _ in 0..years {
        for (j, g) in gevs.iter().enumerate() {
            values[j].push(positive(g.sample_one(rng)));
        }
    }
    Ok((assemble(sites, values)?, mu))
}

pub fn simulate_world<R: Rng + ?Sized>(
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    sites: &[Site],
    years: usize,
    rng: &mut R,
) -> Result<JointDataset> {
    Ok(simulate_world_with_field(theta1, theta2, sites, years, rng)?.0)
}

/// As [`simulate_world`], but within each year the uniforms behind the
/// inverse-CDF draws are coupled by a Gaussian copula with correlation
/// `exp(-d / residual_corr_range)`. Margins stay exactly GEV.
pub fn simulate_misspecified<R: Rng + ?Sized>(
    theta1: &DataLayerParams,
    theta2: &ProcessLayerParams,
    sites: &[Site],
    years: usize,
    residual_corr_range: f64,
    rng: &mut R,
) -> Result<JointDataset> {
    if !(residual_corr_range > 0.0) || !residual_corr_range.is_finite() {
        return Err(Error::Domain("residual correlation range must be positive".into()));
    }
    check_inputs(sites, years)?;
    let locs: Vec<Location> = sites.iter().map(|s| s.location).collect();
    let mu = gp_simulate(&theta2.mean, &theta2.cov, &locs, rng)?;
    let gevs: Vec<GevParams> = locs
        .iter()
        .zip(&mu)
        .map(|(l, m)| theta1.gev_at(l, *m))
        .collect::<Result<_>>()?;
    let d = locs.len();
    let corr = DMatrix::from_fn(d, d, |i, j| (-locs[i].distance_km(&locs[j]) / residual_corr_range).exp());
    let factor = CholeskyFactor::new(corr)?;
    let zero = vec![0.0; d];
    let mut values = vec![Vec::with_capacity(years); d];
    for _ in 0..years {
        let z = simulate_with_factor(&factor, &zero, rng);
        for (j, g) in gevs.iter().enumerate() {
            let u = normal_cdf(z[j]).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            values[j].push(positive(g.quantile_unchecked(u)));
        }
    }
    assemble(sites, values)
}

/// Daily series whose annual maxima are exactly those of `dataset`: each
/// year is complete, the maximum falls on a random day and every other day
/// holds a smaller amount rounded down to 0.1 mm.
pub fn daily_from_maxima<R: Rng + ?Sized>(dataset: &JointDataset, rng: &mut R) -> Result<Vec<DailySeries>> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let l = &r.site.location;
            let mut records = Vec::new();
            for m in &r.maxima {
                let first = NaiveDate::from_ymd_opt(m.year, 1, 1).ok_or_else(|| Error::Domain(format!("bad year {}", m.year)))?;
                let n_days = if NaiveDate::from_ymd_opt(m.year, 2, 29).is_some() { 366 } else { 365 };
                let peak = rng.random_range(0..n_days);
                for d in 0..n_days {
                    let value = if d == peak {
                        m.value
                    } else {
                        (m.value * 9.0 * rng.random::<f64>()).floor() / 10.0
                    };
                    records.push(DailyRecord {
                        date: first + Days::new(d as u64),
                        value: Some(value),
                    });
                }
            }
            Ok(DailySeries {
                site_id: r.site.id.clone(),
                source: l.source,
                lon: l.lon,
                lat: l.lat,
                elevation: l.elevation,
                records,
            })
        })
        .collect()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Annual maxima are positive amounts; a draw below a tenth of a millimetre
/// is recorded as 0.1 mm.
fn positive(v: f64) -> f64 {
    v.max(0.1)
}
