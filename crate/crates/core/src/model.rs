//! Joint field + simulator model: datasets, covariate designs, layer
//! parameters and the downscaling transform.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::GevParams;
use crate::spatial::{centroid, CovarianceSpec, Location, SourceTag, DEFAULT_ORIGIN};

/// Number of location-mean covariates per source: intercept, elevation,
/// latitude, longitude.
pub const MEAN_COVARIATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub location: Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnualMax {
    pub year: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: Site,
    pub maxima: Vec<AnnualMax>,
}

impl SiteRecord {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.maxima.iter().map(|m| m.value)
    }
}

/// Site-tagged annual maxima from field and simulator sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDataset {
    records: Vec<SiteRecord>,
    origin: (f64, f64),
}

impl JointDataset {
    /// Validates records whose locations are already projected about
    /// [`DEFAULT_ORIGIN`].
    pub fn new(records: Vec<SiteRecord>) -> Result<Self> {
        Self::with_origin(records, DEFAULT_ORIGIN)
    }

    /// Re-projects every site about the centroid of the site coordinates.
    pub fn from_geographic(mut records: Vec<SiteRecord>) -> Result<Self> {
        let origin = centroid(records.iter().map(|r| (r.site.location.lon, r.site.location.lat)));
        for r in &mut records {
            let l = r.site.location;
            r.site.location = Location::geographic(l.lon, l.lat, l.elevation, l.source, origin)?;
        }
        Self::with_origin(records, origin)
    }

    /// Validates records projected about `origin`.
    pub fn with_origin(records: Vec<SiteRecord>, origin: (f64, f64)) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("no sites".into()));
        }
        let mut ids = HashSet::new();
        for r in &records {
            let l = &r.site.location;
            if !ids.insert(r.site.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate site id {:?}", r.site.id)));
            }
            if r.maxima.is_empty() {
                return Err(Error::Dataset(format!("site {:?} has no annual maxima", r.site.id)));
            }
            if ![l.lon, l.lat, l.elevation, l.east, l.north].iter().all(|v| v.is_finite()) {
                return Err(Error::Dataset(format!("site {:?} has a non-finite covariate", r.site.id)));
            }
            let mut years = HashSet::new();
            for m in &r.maxima {
                if !years.insert(m.year) {
                    return Err(Error::Dataset(format!("site {:?} repeats year {}", r.site.id, m.year)));
                }
                if !(m.value > 0.0) || !m.value.is_finite() {
                    return Err(Error::Dataset(format!(
                        "site {:?} year {} has non-positive maximum {}",
                        r.site.id, m.year, m.value
                    )));
                }
            }
        }
        Ok(Self { records, origin })
    }

    pub fn records(&self) -> &[SiteRecord] {
        &self.records
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn n_sites(&self) -> usize {
        self.records.len()
    }

    pub fn locations(&self) -> Vec<Location> {
        self.records.iter().map(|r| r.site.location).collect()
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.site.id.clone()).collect()
    }

    pub fn site_index(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.site.id == id)
    }

    /// Sources with at least one site, in `[Field, Simulator]` order.
    pub fn sources(&self) -> Vec<SourceTag> {
        SourceTag::ALL
            .into_iter()
            .filter(|s| self.records.iter().any(|r| r.site.location.source == *s))
            .collect()
    }

    pub fn n_observations(&self) -> usize {
        self.records.iter().map(|r| r.maxima.len()).sum()
    }

    /// Dataset restricted to the given site indices, keeping the projection.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let records = keep.iter().map(|&i| self.records[i].clone()).collect();
        Self::with_origin(records, self.origin)
    }

    /// Dataset with the listed site ids removed.
    pub fn without(&self, ids: &[String]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.records.len())
            .filter(|&i| !ids.contains(&self.records[i].site.id))
            .collect();
        self.subset(&keep)
    }
}

/// Monotone map applied to simulator maxima before modelling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DownscalingFunction {
    #[default]
    Identity,
    Affine { slope: f64, intercept: f64 },
}

impl DownscalingFunction {
    pub fn affine(slope: f64, intercept: f64) -> Result<Self> {
        if !(slope > 0.0) || !slope.is_finite() || !intercept.is_finite() {
            return Err(Error::Domain(format!(
                "downscaling function must be strictly increasing, got slope {slope}"
            )));
        }
        Ok(DownscalingFunction::Affine { slope, intercept })
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            DownscalingFunction::Identity => x,
            DownscalingFunction::Affine { slope, intercept } => slope * x + intercept,
        }
    }

    /// Applies the function to a value from the given source; field values
    /// pass through unchanged.
    pub fn apply_for(&self, source: SourceTag, x: f64) -> f64 {
        match source {
            SourceTag::Field => x,
            SourceTag::Simulator => self.apply(x),
        }
    }
}

/// Replaces each simulator maximum by `g(value)`.
pub fn apply_downscaling(g: &DownscalingFunction, dataset: &JointDataset) -> Result<JointDataset> {
    if let DownscalingFunction::Affine { slope, .. } = g {
        if !(*slope > 0.0) {
            return Err(Error::Domain("downscaling slope must be positive".into()));
        }
    }
    let records = dataset
        .records
        .iter()
        .map(|r| {
            let source = r.site.location.source;
            SiteRecord {
                site: r.site.clone(),
                maxima: r
                    .maxima
                    .iter()
                    .map(|m| AnnualMax {
                        year: m.year,
                        value: g.apply_for(source, m.value),
                    })
                    .collect(),
            }
        })
        .collect();
    JointDataset::with_origin(records, dataset.origin)
}

/// Scale and shape parameters of one source:
/// `psi(s) = exp(psi0 + psi1 * elevation(s))`, constant `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub psi0: f64,
    pub psi1: f64,
    pub xi: f64,
}

impl SourceParams {
    pub fn psi_at(&self, elevation: f64) -> f64 {
        (self.psi0 + self.psi1 * elevation).exp()
    }
}

/// Data-layer parameters; a source without sites has no parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataLayerParams {
    pub field: Option<SourceParams>,
    pub simulator: Option<SourceParams>,
}

impl DataLayerParams {
    pub fn get(&self, source: SourceTag) -> Option<&SourceParams> {
        match source {
            SourceTag::Field => self.field.as_ref(),
            SourceTag::Simulator => self.simulator.as_ref(),
        }
    }

    pub fn get_mut(&mut self, source: SourceTag) -> Option<&mut SourceParams> {
        match source {
            SourceTag::Field => self.field.as_mut(),
            SourceTag::Simulator => self.simulator.as_mut(),
        }
    }

    pub fn set(&mut self, source: SourceTag, params: SourceParams) {
        match source {
            SourceTag::Field => self.field = Some(params),
            SourceTag::Simulator => self.simulator = Some(params),
        }
    }

    pub fn sources(&self) -> Vec<SourceTag> {
        SourceTag::ALL.into_iter().filter(|s| self.get(*s).is_some()).collect()
    }

    pub fn source_params(&self, source: SourceTag) -> Result<&SourceParams> {
        self.get(source)
            .ok_or_else(|| Error::Domain(format!("no data-layer parameters for source {source}")))
    }

    pub fn psi_at(&self, loc: &Location) -> Result<f64> {
        Ok(self.source_params(loc.source)?.psi_at(loc.elevation))
    }

    pub fn xi_for(&self, source: SourceTag) -> Result<f64> {
        Ok(self.source_params(source)?.xi)
    }

    /// GEV of a site's maxima given its latent location value.
    pub fn gev_at(&self, loc: &Location, mu: f64) -> Result<GevParams> {
        let p = self.source_params(loc.source)?;
        GevParams::new(mu, p.psi_at(loc.elevation), p.xi)
    }

    /// Flattened `(psi0, psi1, xi)` per present source.
    pub fn to_vec(&self) -> Vec<f64> {
        self.sources()
            .into_iter()
            .flat_map(|s| {
                let p = self.get(s).unwrap();
                [p.psi0, p.psi1, p.xi]
            })
            .collect()
    }

    pub fn from_vec(sources: &[SourceTag], values: &[f64]) -> Result<Self> {
        if values.len() != 3 * sources.len() {
            return Err(Error::Domain("data-layer vector length mismatch".into()));
        }
        let mut out = DataLayerParams {
            field: None,
            simulator: None,
        };
        for (k, s) in sources.iter().enumerate() {
            out.set(
                *s,
                SourceParams {
                    psi0: values[3 * k],
                    psi1: values[3 * k + 1],
                    xi: values[3 * k + 2],
                },
            );
        }
        Ok(out)
    }

    pub fn names(&self) -> Vec<String> {
        self.sources()
            .into_iter()
            .flat_map(|s| {
                let l = s.letter();
                [format!("psi_{l}0"), format!("psi_{l}1"), format!("xi_{l}")]
            })
            .collect()
    }
}

/// Latent-field mean `m(s) = design(s) . coefficients`, one block of
/// [`MEAN_COVARIATES`] coefficients per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStructure {
    sources: Vec<SourceTag>,
    coefficients: Vec<f64>,
}

impl MeanStructure {
    pub fn new(sources: Vec<SourceTag>, coefficients: Vec<f64>) -> Result<Self> {
        if sources.is_empty() || coefficients.len() != MEAN_COVARIATES * sources.len() {
            return Err(Error::Domain(format!(
                "mean structure needs {} coefficients per source",
                MEAN_COVARIATES
            )));
        }
        Ok(Self { sources, coefficients })
    }

    /// Constant mean `value` for every source.
    pub fn constant(sources: Vec<SourceTag>, value: f64) -> Self {
        let mut coefficients = vec![0.0; MEAN_COVARIATES * sources.len()];
        for k in 0..sources.len() {
            coefficients[MEAN_COVARIATES * k] = value;
        }
        Self { sources, coefficients }
    }

    pub fn sources(&self) -> &[SourceTag] {
        &self.sources
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn set_coefficients(&mut self, c: Vec<f64>) {
        assert_eq!(c.len(), self.coefficients.len());
        self.coefficients = c;
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    /// Covariate row: zeros outside the site's own source block.
    pub fn design(&self, loc: &Location) -> Result<Vec<f64>> {
        let block = self
            .sources
            .iter()
            .position(|s| *s == loc.source)
            .ok_or_else(|| Error::Domain(format!("mean structure has no block for source {}", loc.source)))?;
        if ![loc.elevation, loc.lat, loc.lon].iter().all(|v| v.is_finite()) {
            return Err(Error::Dataset("missing covariate".into()));
        }
        let mut row = vec![0.0; self.coefficients.len()];
        let o = MEAN_COVARIATES * block;
        row[o] = 1.0;
        row[o + 1] = loc.elevation;
        row[o + 2] = loc.lat;
        row[o + 3] = loc.lon;
        Ok(row)
    }

    pub fn mean_at(&self, loc: &Location) -> Result<f64> {
        Ok(self.design(loc)?.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum())
    }

    pub fn means(&self, sites: &[Location]) -> Result<Vec<f64>> {
        sites.iter().map(|s| self.mean_at(s)).collect()
    }

    pub fn design_matrix(&self, sites: &[Location]) -> Result<DMatrix<f64>> {
        let p = self.coefficients.len();
        let mut x = DMatrix::zeros(sites.len(), p);
        for (i, s) in sites.iter().enumerate() {
            for (j, v) in self.design(s)?.into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        Ok(x)
    }

    pub fn names(&self) -> Vec<String> {
        self.sources
            .iter()
            .flat_map(|s| (0..MEAN_COVARIATES).map(move |k| format!("mu_{}{}", s.letter(), k)))
            .collect()
    }
}

/// Process-layer parameters: GP mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessLayerParams {
    pub mean: MeanStructure,
    pub cov: CovarianceSpec,
    /// When set the nugget is held at its current value during estimation.
    pub tau_fixed: bool,
}

/// Covariate designs of the joint model over a set of sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub sources: Vec<SourceTag>,
    /// Location-mean design, `D x 4S`.
    pub location: DMatrix<f64>,
    /// Log-scale design, `D x 2S`: per-source intercept and elevation.
    pub scale: DMatrix<f64>,
    /// Index into `sources` of each site's shape parameter.
    pub shape_index: Vec<usize>,
}

pub fn build_design(sites: &[Location]) -> Result<Design> {
    let sources: Vec<SourceTag> = SourceTag::ALL
        .into_iter()
        .filter(|s| sites.iter().any(|l| l.source == *s))
        .collect();
    if sources.is_empty() {
        return Err(Error::Dataset("no sites".into()));
    }
    let mean = MeanStructure::constant(sources.clone(), 0.0);
    let location = mean.design_matrix(sites)?;
    let mut scale = DMatrix::zeros(sites.len(), 2 * sources.len());
    let mut shape_index = Vec::with_capacity(sites.len());
    for (i, s) in sites.iter().enumerate() {
        let k = sources.iter().position(|t| *t == s.source).unwrap();
        scale[(i, 2 * k)] = 1.0;
        scale[(i, 2 * k + 1)] = s.elevation;
        shape_index.push(k);
    }
    Ok(Design {
        sources,
        location,
        scale,
        shape_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(id: &str, loc: Location, values: &[f64]) -> SiteRecord {
        SiteRecord {
            site: Site {
                id: id.into(),
                location: loc,
            },
            maxima: values
                .iter()
                .enumerate()
                .map(|(i, &v)| AnnualMax {
                    year: 2000 + i as i32,
                    value: v,
                })
                .collect(),
        }
    }

    fn two_source_dataset() -> JointDataset {
        JointDataset::new(vec![
            record("g1", Location::planar(0.0, 0.0, 100.0, SourceTag::Field), &[30.0, 41.0]),
            record("c1", Location::planar(10.0, 0.0, 80.0, SourceTag::Simulator), &[20.0, 25.0]),
        ])
        .unwrap()
    }

    #[test]
    fn field_row_has_zero_simulator_block() {
        let sites = two_source_dataset().locations();
        let d = build_design(&sites).unwrap();
        assert_eq!(d.location.ncols(), 8);
        assert_eq!(d.scale.ncols(), 4);
        for j in 4..8 {
            assert_eq!(d.location[(0, j)], 0.0);
        }
        assert_eq!(d.location[(0, 0)], 1.0);
        assert_eq!(d.location[(0, 1)], 100.0);
        assert_eq!(d.shape_index, vec![0, 1]);
    }

    #[test]
    fn field_only_design_has_no_simulator_columns() {
        let sites = vec![Location::planar(0.0, 0.0, 10.0, SourceTag::Field)];
        let d = build_design(&sites).unwrap();
        assert_eq!(d.sources, vec![SourceTag::Field]);
        assert_eq!(d.location.ncols(), 4);
    }

    #[test]
    fn missing_covariate_rejected() {
        let mut loc = Location::planar(0.0, 0.0, 10.0, SourceTag::Field);
        loc.elevation = f64::NAN;
        assert!(build_design(&[loc]).is_err());
    }

    #[test]
    fn published_field_mean_coefficients() {
        let loc = Location::planar(5.0, 5.0, 100.0, SourceTag::Field);
        let mean = MeanStructure::new(
            vec![SourceTag::Field, SourceTag::Simulator],
            vec![41.8, 0.0342, -0.371, -0.276, 33.0, 0.0223, -0.162, -0.205],
        )
        .unwrap();
        let expected = 41.8 + 0.0342 * 100.0 - 0.371 * loc.lat - 0.276 * loc.lon;
        assert_relative_eq!(mean.mean_at(&loc).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn published_simulator_scale_at_sea_level() {
        let p = SourceParams {
            psi0: 1.76,
            psi1: 0.000986,
            xi: 0.05,
        };
        assert_relative_eq!(p.psi_at(0.0), 1.76f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn downscaling_identity_and_affine() {
        let data = two_source_dataset();
        assert_eq!(apply_downscaling(&DownscalingFunction::Identity, &data).unwrap(), data);
        let g = DownscalingFunction::affine(2.0, 0.0).unwrap();
        let doubled = apply_downscaling(&g, &data).unwrap();
        assert_eq!(doubled.records()[0].maxima, data.records()[0].maxima);
        let sim: Vec<f64> = doubled.records()[1].values().collect();
        assert_eq!(sim, vec![40.0, 50.0]);
        assert!(DownscalingFunction::affine(0.0, 1.0).is_err());
        assert!(DownscalingFunction::affine(-1.0, 1.0).is_err());
    }

    #[test]
    fn increasing_transform_commutes_with_maximum() {
        let g = DownscalingFunction::affine(1.3, -2.0).unwrap();
        let zs = [3.0, 9.5, 7.25, 1.0];
        let max_then_g = g.apply(zs.iter().cloned().fold(f64::MIN, f64::max));
        let g_then_max = zs.iter().map(|&z| g.apply(z)).fold(f64::MIN, f64::max);
        assert_eq!(max_then_g, g_then_max);
    }

    #[test]
    fn dataset_validation() {
        let loc = Location::planar(0.0, 0.0, 1.0, SourceTag::Field);
        assert!(JointDataset::new(vec![record("a", loc, &[])]).is_err());
        assert!(JointDataset::new(vec![record("a", loc, &[1.0]), record("a", loc, &[2.0])]).is_err());
        assert!(JointDataset::new(vec![record("a", loc, &[-1.0])]).is_err());
        let mut dup_year = record("a", loc, &[1.0, 2.0]);
        dup_year.maxima[1].year = dup_year.maxima[0].year;
        assert!(JointDataset::new(vec![dup_year]).is_err());
    }

    #[test]
    fn relabeling_source_moves_design_block_only() {
        let field = Location::planar(1.0, 2.0, 50.0, SourceTag::Field);
        let sim = field.with_source(SourceTag::Simulator);
        let mean = MeanStructure::constant(vec![SourceTag::Field, SourceTag::Simulator], 0.0);
        let a = mean.design(&field).unwrap();
        let b = mean.design(&sim).unwrap();
        assert_eq!(&a[..4], &b[4..]);
        assert!(a[4..].iter().all(|v| *v == 0.0));
        assert!(b[..4].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parameter_names_follow_table_layout() {
        let p = DataLayerParams {
            field: Some(SourceParams {
                psi0: 1.0,
                psi1: 0.0,
                xi: 0.1,
            }),
            simulator: None,
        };
        assert_eq!(p.names(), vec!["psi_F0", "psi_F1", "xi_F"]);
        let round = DataLayerParams::from_vec(&p.sources(), &p.to_vec()).unwrap();
        assert_eq!(round, p);
        let m = MeanStructure::constant(vec![SourceTag::Simulator], 1.0);
        assert_eq!(m.names(), vec!["mu_M0", "mu_M1", "mu_M2", "mu_M3"]);
    }
}
