//! Daily rainfall series and annual-maximum tables: parsing, extraction of
//! annual maxima under the missing-day rule, and dataset assembly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnualMax, JointDataset, Site, SiteRecord};
use crate::spatial::{Location, SourceTag};

pub const DAILY_HEADER: [&str; 7] = ["source", "site_id", "lon", "lat", "elevation_m", "date", "value_mm"];
pub const MAXIMA_HEADER: [&str; 7] = ["source", "site_id", "lon", "lat", "elevation_m", "year", "max_mm"];
pub const MISSING: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyRecord {
    pub date: NaiveDate,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub site_id: String,
    pub source: SourceTag,
    pub lon: f64,
    pub lat: f64,
    pub elevation: f64,
    pub records: Vec<DailyRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// A year is dropped when this many days or more are missing.
    pub max_missing_days: u32,
    /// Drop sites left without any year instead of failing.
    pub drop_empty_sites: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_missing_days: 5,
            drop_empty_sites: true,
        }
    }
}

fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// Annual maxima of a daily series. Days absent from the records count as
/// missing, as do records marked missing.
pub fn extract_annual_maxima(series: &DailySeries) -> Vec<AnnualMax> {
    extract_with(series, IngestConfig::default().max_missing_days)
}

fn extract_with(series: &DailySeries, max_missing: u32) -> Vec<AnnualMax> {
    let mut by_year: BTreeMap<i32, (HashSet<NaiveDate>, f64)> = BTreeMap::new();
    for r in &series.records {
        let e = by_year.entry(r.date.year()).or_insert_with(|| (HashSet::new(), f64::NEG_INFINITY));
        if let Some(v) = r.value {
            e.0.insert(r.date);
            e.1 = e.1.max(v);
        }
    }
    by_year
        .into_iter()
        .filter_map(|(year, (present, max))| {
            let missing = days_in_year(year) - present.len() as u32;
            (missing < max_missing && max.is_finite()).then_some(AnnualMax { year, value: max })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site_id: String,
    pub source: SourceTag,
    pub years_in_file: usize,
    pub years_retained: usize,
    pub years_dropped: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestionReport {
    pub sites: Vec<SiteReport>,
    pub sites_dropped: Vec<String>,
}

impl IngestionReport {
    pub fn years_dropped(&self) -> usize {
        self.sites.iter().map(|s| s.years_dropped.len()).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["site_id", "source", "years_in_file", "years_retained", "years_dropped", "site_dropped"])?;
        for s in &self.sites {
            let dropped: Vec<String> = s.years_dropped.iter().map(|y| y.to_string()).collect();
            out.write_record([
                s.site_id.clone(),
                s.source.to_string(),
                s.years_in_file.to_string(),
                s.years_retained.to_string(),
                dropped.join(" "),
                self.sites_dropped.contains(&s.site_id).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parsed input file.
#[derive(Debug, Clone, PartialEq)]
pub enum InputTable {
    Daily(Vec<DailySeries>),
    Maxima(Vec<MaximaSeries>),
}

/// Pre-extracted annual maxima of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct MaximaSeries {
    pub site_id: String,
    pub source: SourceTag,
    pub lon: f64,
    pub lat: f64,
    pub elevation: f64,
    pub maxima: Vec<AnnualMax>,
}

fn schema(line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        line: line as usize,
        message: message.into(),
    }
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| schema(line, format!("{name}: cannot parse {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(schema(line, format!("{name}: non-finite value")));
    }
    Ok(v)
}

struct SiteHeader {
    source: SourceTag,
    lon: f64,
    lat: f64,
    elevation: f64,
    line: u64,
}

fn parse_site(rec: &csv::StringRecord, line: u64) -> Result<(String, SiteHeader)> {
    let source: SourceTag = rec[0].parse().map_err(|_| schema(line, format!("source: unknown tag {:?}", &rec[0])))?;
    let id = rec[1].trim().to_string();
    if id.is_empty() {
        return Err(schema(line, "site_id is empty"));
    }
    Ok((
        id,
        SiteHeader {
            source,
            lon: parse_f64(&rec[2], "lon", line)?,
            lat: parse_f64(&rec[3], "lat", line)?,
            elevation: parse_f64(&rec[4], "elevation_m", line)?,
            line,
        },
    ))
}

fn check_consistent(prev: &SiteHeader, cur: &SiteHeader, id: &str) -> Result<()> {
    if prev.source != cur.source || prev.lon != cur.lon || prev.lat != cur.lat || prev.elevation != cur.elevation {
        return Err(schema(
            cur.line,
            format!("site {id:?} changes source or covariates from line {}", prev.line),
        ));
    }
    Ok(())
}

/// Parses either CSV layout, chosen by the header row.
pub fn read_table<R: Read>(reader: R) -> Result<InputTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| schema(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let header_line = rdr.position().line().max(1);
    if header.iter().all(|h| h.is_empty()) {
        return Err(schema(1, "empty file: header row required"));
    }
    let daily = header == DAILY_HEADER;
    if !daily && header != MAXIMA_HEADER {
        return Err(schema(
            header_line,
            format!(
                "unexpected header {:?}; expected {} or {}",
                header.join(","),
                DAILY_HEADER.join(","),
                MAXIMA_HEADER.join(",")
            ),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut headers: HashMap<String, SiteHeader> = HashMap::new();
    let mut daily_rows: HashMap<String, Vec<DailyRecord>> = HashMap::new();
    let mut max_rows: HashMap<String, Vec<AnnualMax>> = HashMap::new();
    let mut seen: HashSet<(String, i64)> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 7 {
            return Err(schema(line, format!("expected 7 fields, found {}", rec.len())));
        }
        let (id, site) = parse_site(&rec, line)?;
        match headers.get(&id) {
            Some(prev) => check_consistent(prev, &site, &id)?,
            None => {
                order.push(id.clone());
                headers.insert(id.clone(), site);
            }
        }
        if daily {
            let date = NaiveDate::parse_from_str(rec[5].trim(), "%Y-%m-%d")
                .map_err(|_| schema(line, format!("date: cannot parse {:?} as YYYY-MM-DD", &rec[5])))?;
            if !seen.insert((id.clone(), date.num_days_from_ce() as i64)) {
                return Err(schema(line, format!("site {id:?} repeats date {date}")));
            }
            let raw = rec[6].trim();
            let value = if raw == MISSING {
                None
            } else {
                let v = parse_f64(raw, "value_mm", line)?;
                if v < 0.0 {
                    return Err(schema(line, "value_mm must be non-negative"));
                }
                Some(v)
            };
            daily_rows.entry(id).or_default().push(DailyRecord { date, value });
        } else {
            let year: i32 = rec[5]
                .trim()
                .parse()
                .map_err(|_| schema(line, format!("year: cannot parse {:?}", &rec[5])))?;
            if !seen.insert((id.clone(), year as i64)) {
                return Err(schema(line, format!("site {id:?} repeats year {year}")));
            }
            let value = parse_f64(&rec[6], "max_mm", line)?;
            max_rows.entry(id).or_default().push(AnnualMax { year, value });
        }
    }
    if order.is_empty() {
        return Err(schema(header_line + 1, "no data rows"));
    }
    let table = if daily {
        InputTable::Daily(
            order
                .into_iter()
                .map(|id| {
                    let h = &headers[&id];
                    DailySeries {
                        source: h.source,
                        lon: h.lon,
                        lat: h.lat,
                        elevation: h.elevation,
                        records: daily_rows.remove(&id).unwrap_or_default(),
                        site_id: id,
                    }
                })
                .collect(),
        )
    } else {
        InputTable::Maxima(
            order
                .into_iter()
                .map(|id| {
                    let h = &headers[&id];
                    let mut maxima = max_rows.remove(&id).unwrap_or_default();
                    maxima.sort_by_key(|m| m.year);
                    MaximaSeries {
                        source: h.source,
                        lon: h.lon,
                        lat: h.lat,
                        elevation: h.elevation,
                        maxima,
                        site_id: id,
                    }
                })
                .collect(),
        )
    };
    Ok(table)
}

pub fn read_table_file(path: &Path) -> Result<InputTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    read_table(std::io::BufReader::new(f))
}

/// Maxima of every series, with per-site bookkeeping of dropped years.
pub fn to_maxima(table: InputTable, cfg: &IngestConfig) -> (Vec<MaximaSeries>, Vec<SiteReport>) {
    let mut reports = Vec::new();
    let series: Vec<MaximaSeries> = match table {
        InputTable::Daily(daily) => daily
            .into_iter()
            .map(|s| {
                let years_in_file: HashSet<i32> = s.records.iter().map(|r| r.date.year()).collect();
                let maxima = extract_with(&s, cfg.max_missing_days);
                reports.push(report_for(&s.site_id, s.source, years_in_file, &maxima));
                MaximaSeries {
                    site_id: s.site_id,
                    source: s.source,
                    lon: s.lon,
                    lat: s.lat,
                    elevation: s.elevation,
                    maxima,
                }
            })
            .collect(),
        InputTable::Maxima(m) => m
            .into_iter()
            .map(|mut s| {
                let years_in_file: HashSet<i32> = s.maxima.iter().map(|m| m.year).collect();
                s.maxima.retain(|m| m.value > 0.0);
                reports.push(report_for(&s.site_id, s.source, years_in_file, &s.maxima));
                s
            })
            .collect(),
    };
    (series, reports)
}

fn report_for(id: &str, source: SourceTag, years_in_file: HashSet<i32>, kept: &[AnnualMax]) -> SiteReport {
    let kept_years: HashSet<i32> = kept.iter().map(|m| m.year).collect();
    let mut dropped: Vec<i32> = years_in_file.difference(&kept_years).cloned().collect();
    dropped.sort();
    SiteReport {
        site_id: id.to_string(),
        source,
        years_in_file: years_in_file.len(),
        years_retained: kept.len(),
        years_dropped: dropped,
    }
}

/// Reads one or two input files (daily series or annual maxima), extracts
/// maxima, projects coordinates and validates the result.
pub fn load_dataset(field_path: &Path, simulator_path: Option<&Path>, cfg: &IngestConfig) -> Result<(JointDataset, IngestionReport)> {
    let mut tables = vec![read_table_file(field_path)?];
    if let Some(p) = simulator_path {
        tables.push(read_table_file(p)?);
    }
    dataset_from_tables(tables, cfg)
}

/// Dataset from in-memory tables.
pub fn dataset_from_tables(tables: Vec<InputTable>, cfg: &IngestConfig) -> Result<(JointDataset, IngestionReport)> {
    let mut series = Vec::new();
    let mut report = IngestionReport::default();
    for t in tables {
        let (s, r) = to_maxima(t, cfg);
        series.extend(s);
        report.sites.extend(r);
    }
    let dataset = assemble(series, cfg, &mut report)?;
    Ok((dataset, report))
}

fn assemble(series: Vec<MaximaSeries>, cfg: &IngestConfig, report: &mut IngestionReport) -> Result<JointDataset> {
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for s in series {
        if !ids.insert(s.site_id.clone()) {
            return Err(Error::Dataset(format!("duplicate site id {:?}", s.site_id)));
        }
        if s.maxima.is_empty() {
            if cfg.drop_empty_sites {
                report.sites_dropped.push(s.site_id);
                continue;
            }
            return Err(Error::Dataset(format!("site {:?} has no retained year", s.site_id)));
        }
        records.push(SiteRecord {
            site: Site {
                id: s.site_id,
                location: Location {
                    east: 0.0,
                    north: 0.0,
                    lon: s.lon,
                    lat: s.lat,
                    elevation: s.elevation,
                    source: s.source,
                },
            },
            maxima: s.maxima,
        });
    }
    JointDataset::from_geographic(records)
}

fn source_word(s: SourceTag) -> &'static str {
    match s {
        SourceTag::Field => "field",
        SourceTag::Simulator => "simulator",
    }
}

/// Writes the annual-maxima layout, optionally preceded by a `#` comment.
pub fn write_maxima_csv<W: Write>(dataset: &JointDataset, mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MAXIMA_HEADER)?;
    for r in dataset.records() {
        let l = &r.site.location;
        for m in &r.maxima {
            out.write_record([
                source_word(l.source).to_string(),
                r.site.id.clone(),
                l.lon.to_string(),
                l.lat.to_string(),
                l.elevation.to_string(),
                m.year.to_string(),
                m.value.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes daily series in the daily layout.
pub fn write_daily_csv<W: Write>(series: &[DailySeries], mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DAILY_HEADER)?;
    for s in series {
        for r in &s.records {
            out.write_record([
                source_word(s.source).to_string(),
                s.site_id.clone(),
                s.lon.to_string(),
                s.lat.to_string(),
                s.elevation.to_string(),
                r.date.format("%Y-%m-%d").to_string(),
                r.value.map_or_else(|| MISSING.to_string(), |v| v.to_string()),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(year: i32, missing: u32, value: f64) -> DailySeries {
        let start = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
        let n = days_in_year(year);
        let records = (0..n)
            .map(|k| DailyRecord {
                date: start + chrono::Days::new(k as u64),
                value: if k < missing { None } else { Some(value + (k % 7) as f64) },
            })
            .collect();
        DailySeries {
            site_id: "a".into(),
            source: SourceTag::Field,
            lon: -1.0,
            lat: 52.0,
            elevation: 10.0,
            records,
        }
    }

    #[test]
    fn four_missing_days_retained_five_dropped() {
        let four = extract_annual_maxima(&series(2001, 4, 3.0));
        assert_eq!(four, vec![AnnualMax { year: 2001, value: 9.0 }]);
        assert!(extract_annual_maxima(&series(2001, 5, 3.0)).is_empty());
        // leap year: 366 days in the calendar
        assert_eq!(extract_annual_maxima(&series(2004, 4, 3.0)).len(), 1);
    }

    #[test]
    fn absent_days_count_as_missing() {
        let mut s = series(2001, 0, 1.0);
        s.records.truncate(360);
        assert!(extract_annual_maxima(&s).is_empty());
        s = series(2001, 0, 1.0);
        s.records.truncate(361);
        assert_eq!(extract_annual_maxima(&s).len(), 1);
    }

    #[test]
    fn constant_series() {
        let mut s = series(1999, 0, 0.0);
        for r in &mut s.records {
            r.value = Some(12.5);
        }
        assert_eq!(extract_annual_maxima(&s), vec![AnnualMax { year: 1999, value: 12.5 }]);
    }

    #[test]
    fn empty_file_is_schema_error() {
        assert!(matches!(read_table("".as_bytes()), Err(Error::Schema { .. })));
        let header_only = "source,site_id,lon,lat,elevation_m,year,max_mm\n";
        assert!(matches!(read_table(header_only.as_bytes()), Err(Error::Schema { .. })));
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let text = "# comment\nsource,site_id,lon,lat,elevation_m,year,max_mm\nfield,a,-1,52,10,2000,30\nfield,a,-1,52,10,2001,abc\n";
        match read_table(text.as_bytes()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_sources_two_sites_three_years() {
        let mut text = String::from("source,site_id,lon,lat,elevation_m,year,max_mm\n");
        for (src, id, lon) in [("field", "g1", -1.0), ("field", "g2", -1.2), ("simulator", "c1", -1.1), ("M", "c2", -1.3)] {
            for y in 2000..2003 {
                text.push_str(&format!("{src},{id},{lon},52.3,50,{y},{}\n", 20 + y - 2000));
            }
        }
        let (data, report) = dataset_from_tables(vec![read_table(text.as_bytes()).unwrap()], &IngestConfig::default()).unwrap();
        assert_eq!(data.n_sites(), 4);
        assert!(data.records().iter().all(|r| r.maxima.len() == 3));
        assert_eq!(report.years_dropped(), 0);
        assert_eq!(data.sources().len(), 2);
    }

    #[test]
    fn duplicate_site_across_files_rejected() {
        let text = "source,site_id,lon,lat,elevation_m,year,max_mm\nfield,a,-1,52,10,2000,30\n";
        let t = read_table(text.as_bytes()).unwrap();
        assert!(dataset_from_tables(vec![t.clone(), t], &IngestConfig::default()).is_err());
    }

    #[test]
    fn daily_round_trip_through_writer() {
        let s = series(2002, 2, 4.0);
        let mut buf = Vec::new();
        write_daily_csv(std::slice::from_ref(&s), &mut buf, Some("test")).unwrap();
        match read_table(buf.as_slice()).unwrap() {
            InputTable::Daily(v) => assert_eq!(v, vec![s]),
            _ => panic!("wrong layout"),
        }
    }
}
