//! Return-level maps: kriged location draws combined with sampled data-layer
//! parameters on a regular grid.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::{GevParams, ReturnLevelSpec};
use crate::gp::Kriger;
use crate::linalg::CholeskyFactor;
use crate::mcem::FitResult;
use crate::model::SourceParams;
use crate::spatial::{Location, SourceTag, KM_PER_DEG_LAT, KM_PER_DEG_LON};

/// Regular grid over a longitude/latitude box with cells of about
/// `cell_km` on a side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub cell_km: f64,
}

impl GridSpec {
    pub fn new(lon1: f64, lat1: f64, lon2: f64, lat2: f64, cell_km: f64) -> Result<Self> {
        if ![lon1, lat1, lon2, lat2].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("bounding box must be finite".into()));
        }
        if !(cell_km > 0.0) || !cell_km.is_finite() {
            return Err(Error::Domain(format!("cell size must be positive, got {cell_km}")));
        }
        Ok(Self {
            lon_min: lon1.min(lon2),
            lat_min: lat1.min(lat2),
            lon_max: lon1.max(lon2),
            lat_max: lat1.max(lat2),
            cell_km,
        })
    }

    /// Parses `lon1,lat1,lon2,lat2`.
    pub fn from_bbox(bbox: &str, cell_km: f64) -> Result<Self> {
        let v: Vec<f64> = bbox
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Domain(format!("bad bbox value {s:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Domain(format!("bbox needs four values, got {}", v.len())));
        }
        Self::new(v[0], v[1], v[2], v[3], cell_km)
    }

    /// Cell centres, row by row from the south-west corner.
    pub fn centres(&self) -> Vec<(f64, f64)> {
        let lat_mid = 0.5 * (self.lat_min + self.lat_max);
        let dlat = self.cell_km / KM_PER_DEG_LAT;
        let dlon = self.cell_km / (KM_PER_DEG_LON * lat_mid.to_radians().cos());
        let n_lat = (((self.lat_max - self.lat_min) / dlat).floor() as usize).max(1);
        let n_lon = (((self.lon_max - self.lon_min) / dlon).floor() as usize).max(1);
        let mut out = Vec::with_capacity(n_lat * n_lon);
        for i in 0..n_lat {
            for j in 0..n_lon {
                out.push((self.lon_min + (j as f64 + 0.5) * dlon, self.lat_min + (i as f64 + 0.5) * dlat));
            }
        }
        out
    }
}

/// Elevation samples `(lon, lat, elevation_m)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ElevationRaster {
    pub points: Vec<(f64, f64, f64)>,
}

pub const ELEVATION_HEADER: [&str; 3] = ["lon", "lat", "elevation_m"];

impl ElevationRaster {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != ELEVATION_HEADER {
            return Err(Error::Schema {
                line: 1,
                message: format!("expected header {}", ELEVATION_HEADER.join(",")),
            });
        }
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Schema {
                        line,
                        message: format!("column {} is not a finite number", ELEVATION_HEADER[k]),
                    })
            };
            points.push((num(0)?, num(1)?, num(2)?));
        }
        if points.is_empty() {
            return Err(Error::Schema {
                line: 1,
                message: "elevation raster has no rows".into(),
            });
        }
        Ok(Self { points })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    /// Elevation of the nearest raster point within `max_km` of
    /// `(lon, lat)`.
    pub fn lookup(&self, lon: f64, lat: f64, max_km: f64) -> Option<f64> {
        let c = lat.to_radians().cos();
        self.points
            .iter()
            .map(|&(x, y, e)| {
                let de = (x - lon) * KM_PER_DEG_LON * c;
                let dn = (y - lat) * KM_PER_DEG_LAT;
                (de.hypot(dn), e)
            })
            .filter(|(d, _)| *d <= max_km)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, e)| e)
    }
}

/// Field locations for the grid cells, projected about `origin`. Cells
/// without a raster point within one cell width are rejected.
pub fn grid_locations(grid: &GridSpec, raster: &ElevationRaster, origin: (f64, f64)) -> Result<Vec<Location>> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for (lon, lat) in grid.centres() {
        match raster.lookup(lon, lat, grid.cell_km) {
            Some(e) => out.push(Location::geographic(lon, lat, e, SourceTag::Field, origin)?),
            None => missing.push(format!("({lon:.4}, {lat:.4})")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} grid cells have no elevation: {}",
            missing.len(),
            missing.iter().take(5).cloned().collect::<Vec<_>>().join(" ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub p_years: f64,
    pub n_uncertainty_draws: usize,
    /// Level of the reported interval.
    pub level: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            p_years: 100.0,
            n_uncertainty_draws: 500,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub lon: f64,
    pub lat: f64,
    pub elevation: f64,
    /// Median of the sampled return levels.
    pub return_level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelMap {
    pub p_years: f64,
    pub cells: Vec<MapCell>,
    pub warnings: Vec<String>,
}

/// Linear-interpolation quantile of sorted values.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Return levels at `targets` for field-scale maxima. Each uncertainty draw
/// pairs a final latent draw (cycled), kriged to the target with a
/// conditional-simulation normal, with field-source `(psi0, psi1, xi)`
/// drawn from the sandwich normal.
pub fn return_level_map<R: Rng + ?Sized>(fit: &FitResult, targets: &[Location], opts: &MapOptions, rng: &mut R) -> Result<ReturnLevelMap> {
    if targets.is_empty() {
        return Err(Error::Domain("no map targets".into()));
    }
    if opts.n_uncertainty_draws == 0 {
        return Err(Error::Domain("need at least one uncertainty draw".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Domain(format!("interval level must lie in (0, 1), got {}", opts.level)));
    }
    let rl = ReturnLevelSpec::new(opts.p_years)?;
    let draws = fit.draws()?;
    let field = *fit.theta1.source_params(SourceTag::Field)?;
    let mut warnings = Vec::new();
    if opts.n_uncertainty_draws == 1 {
        warnings.push("one uncertainty draw: intervals are degenerate".to_string());
    }
    let (e_min, e_max) = draws
        .sites
        .iter()
        .filter(|s| s.source == SourceTag::Field)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.elevation), b.max(s.elevation)));
    let outside = targets.iter().filter(|t| t.elevation < e_min || t.elevation > e_max).count();
    if outside > 0 {
        warnings.push(format!(
            "{outside} cells lie outside the observed field elevation range [{e_min}, {e_max}] m"
        ));
    }
    let block = fit.theta1.sources().iter().position(|s| *s == SourceTag::Field).unwrap();
    let factor = match &fit.info {
        Some(info) => {
            let sub = info.sandwich_cov.view((3 * block, 3 * block), (3, 3)).into_owned();
            match CholeskyFactor::new(sub) {
                Ok(f) => Some(f),
                Err(e) => {
                    warnings.push(format!("data-layer covariance unusable ({e}); parameters held at estimates"));
                    None
                }
            }
        }
        None => {
            warnings.push("fit has no data-layer covariance; parameters held at estimates".into());
            None
        }
    };
    let n = opts.n_uncertainty_draws;
    let params: Vec<SourceParams> = (0..n)
        .map(|_| match &factor {
            Some(f) => {
                let z = DVector::from_iterator(3, (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let d = f.correlate(&z);
                SourceParams {
                    psi0: field.psi0 + d[0],
                    psi1: field.psi1 + d[1],
                    xi: field.xi + d[2],
                }
            }
            None => field,
        })
        .collect();
    let mean = fit.theta2.mean.clone();
    let kriger = Kriger::new(&mean, &fit.theta2.cov, &draws.sites)?;
    let seeds: Vec<u64> = targets.iter().map(|_| rng.random()).collect();
    let tail = (1.0 - opts.level) / 2.0;
    let cells = targets
        .par_iter()
        .zip(seeds)
        .map(|(t, seed)| {
            let mut crng = ChaCha8Rng::seed_from_u64(seed);
            let w = kriger.weights(t)?;
            let sd = w.cond_var.sqrt();
            let mut levels = Vec::with_capacity(n);
            for (j, p) in params.iter().enumerate() {
                let row = draws.row(j % draws.n_draws());
                let z: f64 = crng.sample(StandardNormal);
                let mu = w.cond_mean(row, kriger.site_means()) + sd * z;
                let gev = GevParams::new(mu, p.psi_at(t.elevation), p.xi)?;
                levels.push(gev.quantile(rl.probability())?);
            }
            levels.sort_by(f64::total_cmp);
            let lo = sorted_quantile(&levels, tail);
            let hi = sorted_quantile(&levels, 1.0 - tail);
            Ok(MapCell {
                lon: t.lon,
                lat: t.lat,
                elevation: t.elevation,
                return_level: sorted_quantile(&levels, 0.5),
                ci_lower: lo,
                ci_upper: hi,
                ci_width: hi - lo,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReturnLevelMap {
        p_years: opts.p_years,
        cells,
        warnings,
    })
}

pub const MAP_HEADER: [&str; 7] = ["lon", "lat", "elevation_m", "return_level", "ci_lower", "ci_upper", "ci_width"];

pub fn write_map_csv<W: Write>(map: &ReturnLevelMap, mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MAP_HEADER)?;
    for c in &map.cells {
        out.write_record([
            c.lon.to_string(),
            c.lat.to_string(),
            c.elevation.to_string(),
            c.return_level.to_string(),
            c.ci_lower.to_string(),
            c.ci_upper.to_string(),
            c.ci_width.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::LatentFieldDraws;
    use crate::synthetic::WorldParams;

    fn toy_fit(sites: Vec<Location>, rows: Vec<Vec<f64>>) -> FitResult {
        let p = WorldParams::reference();
        let theta1 = crate::model::DataLayerParams {
            simulator: None,
            ..p.theta1
        };
        let theta2 = crate::model::ProcessLayerParams {
            mean: crate::model::MeanStructure::constant(vec![SourceTag::Field], 20.0),
            ..p.theta2
        };
        FitResult {
            theta1,
            theta2,
            trace: vec![],
            final_draws: Some(LatentFieldDraws::from_rows(sites, rows).unwrap()),
            info: None,
            info_error: None,
        }
    }

    #[test]
    fn grid_centres_cover_box() {
        let g = GridSpec::from_bbox("-2,52,-1,53", 10.0).unwrap();
        let c = g.centres();
        assert!(c.len() > 50);
        assert!(c.iter().all(|(x, y)| (-2.0..=-1.0).contains(x) && (52.0..=53.0).contains(y)));
        assert!(GridSpec::from_bbox("-2,52,-1", 10.0).is_err());
        assert!(GridSpec::from_bbox("-2,52,-1,53", 0.0).is_err());
    }

    #[test]
    fn cells_without_elevation_rejected() {
        let g = GridSpec::from_bbox("-2,52,-1.8,52.2", 5.0).unwrap();
        let raster = ElevationRaster {
            points: vec![(-1.9, 52.1, 100.0)],
        };
        assert!(grid_locations(&g, &raster, (-1.9, 52.1)).is_err());
        let full = ElevationRaster {
            points: g.centres().into_iter().map(|(x, y)| (x, y, 50.0)).collect(),
        };
        assert_eq!(grid_locations(&g, &full, (-1.9, 52.1)).unwrap().len(), g.centres().len());
    }

    #[test]
    fn raster_schema_errors() {
        assert!(ElevationRaster::read("lon,lat\n1,2\n".as_bytes()).is_err());
        let e = ElevationRaster::read("lon,lat,elevation_m\n1,2,3\n1,x,3\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Schema { line: 3, .. }));
    }

    #[test]
    fn single_draw_gives_zero_width_with_warning() {
        let sites = vec![Location::planar(0.0, 0.0, 100.0, SourceTag::Field)];
        let fit = toy_fit(sites, vec![vec![20.0]]);
        let t = [Location::planar(5.0, 0.0, 100.0, SourceTag::Field)];
        let opts = MapOptions {
            n_uncertainty_draws: 1,
            ..MapOptions::default()
        };
        let m = return_level_map(&fit, &t, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.cells[0].ci_width, 0.0);
        assert!(!m.warnings.is_empty());
    }

    #[test]
    fn dense_cell_narrower_than_isolated_cell() {
        let sites: Vec<Location> = (0..6)
            .map(|i| Location::planar(3.0 * (i % 3) as f64, 3.0 * (i / 3) as f64, 100.0, SourceTag::Field))
            .collect();
        let rows: Vec<Vec<f64>> = (0..200).map(|i| (0..6).map(|j| 20.0 + 0.01 * ((i * 7 + j) % 13) as f64).collect()).collect();
        let fit = toy_fit(sites, rows);
        let t = [
            Location::planar(3.0, 1.5, 100.0, SourceTag::Field),
            Location::planar(300.0, 300.0, 100.0, SourceTag::Field),
        ];
        let m = return_level_map(&fit, &t, &MapOptions::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(m.cells[0].ci_width < m.cells[1].ci_width);
    }

    #[test]
    fn p100_uses_upper_percentile() {
        let sites = vec![Location::planar(0.0, 0.0, 0.0, SourceTag::Field)];
        let fit = toy_fit(sites.clone(), vec![vec![20.0]]);
        let opts = MapOptions {
            n_uncertainty_draws: 1,
            ..MapOptions::default()
        };
        let m = return_level_map(&fit, &sites, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = GevParams::new(20.0, 2f64.exp(), 0.1).unwrap();
        assert!((m.cells[0].return_level - g.quantile(0.99).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn sorted_quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sorted_quantile(&v, 0.0), 1.0);
        assert_eq!(sorted_quantile(&v, 1.0), 4.0);
        assert!((sorted_quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
