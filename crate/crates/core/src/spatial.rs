//! Sites, planar distances and the powered-exponential covariance.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometres per degree of latitude in the equirectangular projection.
pub const KM_PER_DEG_LAT: f64 = 110.57;
/// Kilometres per degree of longitude at the equator.
pub const KM_PER_DEG_LON: f64 = 111.32;

/// Projection origin used when sites are placed directly in kilometres.
pub const DEFAULT_ORIGIN: (f64, f64) = (-1.5, 52.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    /// Point-level gauge measurements.
    Field,
    /// Gridded simulator output.
    Simulator,
}

impl SourceTag {
    pub const ALL: [SourceTag; 2] = [SourceTag::Field, SourceTag::Simulator];

    /// Single-letter label used in parameter names (`psi_F0`, `mu_M2`, ...).
    pub fn letter(self) -> char {
        match self {
            SourceTag::Field => 'F',
            SourceTag::Simulator => 'M',
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Field => "field",
            SourceTag::Simulator => "simulator",
        })
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "field" | "f" => Ok(SourceTag::Field),
            "simulator" | "m" => Ok(SourceTag::Simulator),
            other => Err(Error::Domain(format!("unknown source tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    /// Projected easting, km.
    pub east: f64,
    /// Projected northing, km.
    pub north: f64,
    pub lon: f64,
    pub lat: f64,
    /// Metres above sea level.
    pub elevation: f64,
    pub source: SourceTag,
}

impl Location {
    /// A site given in degrees, projected about `origin = (lon0, lat0)`.
    pub fn geographic(lon: f64, lat: f64, elevation: f64, source: SourceTag, origin: (f64, f64)) -> Result<Self> {
        let (east, north) = project_lonlat(lon, lat, origin)?;
        Ok(Self {
            east,
            north,
            lon,
            lat,
            elevation,
            source,
        })
    }

    /// A site given in kilometres about [`DEFAULT_ORIGIN`]; degrees are
    /// recovered by inverting the projection.
    pub fn planar(east: f64, north: f64, elevation: f64, source: SourceTag) -> Self {
        let (lon0, lat0) = DEFAULT_ORIGIN;
        let lat = lat0 + north / KM_PER_DEG_LAT;
        let lon = lon0 + east / (KM_PER_DEG_LON * lat0.to_radians().cos());
        Self {
            east,
            north,
            lon,
            lat,
            elevation,
            source,
        }
    }

    pub fn distance_km(&self, other: &Location) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }

    pub fn with_source(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }

    pub fn same_coordinates(&self, other: &Location) -> bool {
        self.east == other.east && self.north == other.north
    }
}

/// Equirectangular projection about `origin = (lon0, lat0)`.
pub fn project_lonlat(lon: f64, lat: f64, origin: (f64, f64)) -> Result<(f64, f64)> {
    let (lon0, lat0) = origin;
    if !(lat.abs() < 89.0) || !(lat0.abs() < 89.0) {
        return Err(Error::Domain(format!(
            "latitude too close to a pole for the planar projection (lat={lat}, origin lat={lat0})"
        )));
    }
    if !lon.is_finite() || !lon0.is_finite() {
        return Err(Error::Domain("non-finite longitude".into()));
    }
    let east = KM_PER_DEG_LON * lat0.to_radians().cos() * (lon - lon0);
    let north = KM_PER_DEG_LAT * (lat - lat0);
    Ok((east, north))
}

/// Mean longitude and latitude of a set of sites.
pub fn centroid(points: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut lon, mut lat, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in points {
        lon += x;
        lat += y;
        n += 1;
    }
    if n == 0 {
        DEFAULT_ORIGIN
    } else {
        (lon / n as f64, lat / n as f64)
    }
}

/// Powered-exponential covariance parameters.
///
/// `tau` is the nugget standard deviation: `tau^2` is added to the variance
/// of each latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    sigma2: f64,
    tau: f64,
    phi: f64,
    delta: f64,
}

impl CovarianceSpec {
    pub fn new(sigma2: f64, tau: f64, phi: f64, delta: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("sigma2 must be non-negative, got {sigma2}")));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("tau must be non-negative, got {tau}")));
        }
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::Domain(format!("phi must be positive, got {phi}")));
        }
        if !(delta > 0.0 && delta <= 2.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 2], got {delta}")));
        }
        Ok(Self { sigma2, tau, phi, delta })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Marginal variance of one latent coordinate, `sigma2 + tau^2`.
    pub fn total_variance(&self) -> f64 {
        self.sigma2 + self.tau * self.tau
    }

    /// `exp{-(d/phi)^delta}` for a distance `d > 0`; 1 at `d = 0`.
    pub fn decay(&self, d: f64) -> f64 {
        if d == 0.0 {
            1.0
        } else {
            (-(d / self.phi).powf(self.delta)).exp()
        }
    }

    /// Correlation function with the nugget discontinuity at zero distance.
    pub fn correlation(&self, s: &Location, t: &Location) -> Result<f64> {
        let d = s.distance_km(t);
        if d == 0.0 {
            if self.sigma2 == 0.0 {
                if self.tau > 0.0 {
                    return Err(Error::Degenerate(
                        "zero-distance correlation undefined when sigma2 = 0 and tau > 0".into(),
                    ));
                }
                return Ok(1.0);
            }
            Ok(1.0 + self.tau * self.tau / self.sigma2)
        } else {
            Ok(self.decay(d))
        }
    }

    /// Covariance between two distinct latent coordinates.
    pub fn cross_covariance(&self, s: &Location, t: &Location) -> f64 {
        self.sigma2 * self.decay(s.distance_km(t))
    }
}

/// Covariance of the latent field over `sites`.
///
/// The nugget enters the diagonal only: two distinct entries at the same
/// coordinates share `sigma2` but not `tau^2`.
pub fn covariance_matrix(spec: &CovarianceSpec, sites: &[Location]) -> Result<DMatrix<f64>> {
    Ok(covariance_matrix_with_warnings(spec, sites)?.0)
}

/// Like [`covariance_matrix`], also returning index pairs that share coordinates.
pub fn covariance_matrix_with_warnings(
    spec: &CovarianceSpec,
    sites: &[Location],
) -> Result<(DMatrix<f64>, Vec<(usize, usize)>)> {
    if sites.is_empty() {
        return Err(Error::Domain("covariance matrix needs at least one site".into()));
    }
    let d = sites.len();
    let mut duplicates = Vec::new();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = spec.total_variance();
        for j in 0..i {
            if sites[i].same_coordinates(&sites[j]) {
                duplicates.push((j, i));
            }
            let c = spec.cross_covariance(&sites[i], &sites[j]);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok((m, duplicates))
}
