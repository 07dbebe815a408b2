//! Station data ingestion: daily precipitation series, monthly aggregation,
//! coordinate centring and elevation rasters.
//!
//! Monthly aggregates follow the dry-day convention `precip <= threshold`
//! (default 0.1 mm). Days missing from a series, or recorded as missing,
//! break dry-spell runs and are excluded from all counts; a month with zero
//! observed days has every summary missing.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default dry-day threshold in mm.
pub const DRY_THRESHOLD_MM: f64 = 0.1;

/// One daily precipitation value; `None` marks a missing measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyRecord {
    pub date: NaiveDate,
    pub precip_mm: Option<f64>,
}

/// Daily series of one station; dates strictly increasing, values >= 0.
#[derive(Debug, Clone)]
pub struct DailySeries {
    pub station_id: String,
    records: Vec<DailyRecord>,
}

impl DailySeries {
    pub fn new(station_id: impl Into<String>, records: Vec<DailyRecord>) -> Result<Self> {
        let station_id = station_id.into();
        for w in records.windows(2) {
            if w[1].date <= w[0].date {
                return Err(Error::NonMonotoneDates {
                    station: station_id,
                    date: w[1].date.to_string(),
                    previous: w[0].date.to_string(),
                });
            }
        }
        if let Some(r) = records
            .iter()
            .find(|r| r.precip_mm.is_some_and(|v| v < 0.0 || !v.is_finite()))
        {
            return Err(Error::data(format!(
                "negative or non-finite precipitation {:?} at {} ({station_id})",
                r.precip_mm, r.date
            )));
        }
        Ok(DailySeries {
            station_id,
            records,
        })
    }

    pub fn records(&self) -> &[DailyRecord] {
        &self.records
    }
}

/// Per-(year, month) aggregate of a daily series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyAggregate {
    pub year: i32,
    pub month: u32,
    pub dry_spell_max: Option<u32>,
    pub rain_max: Option<f64>,
    pub rain_mean: Option<f64>,
    pub dry_day_count: Option<u32>,
    pub days_observed: u32,
}

/// Aggregate a daily series into monthly summaries.
///
/// A day is dry iff `precip <= dry_threshold_mm`. Calendar days without a
/// record count as missing: they break dry-spell runs and do not enter any
/// count. Months within the series' span with zero observed days still
/// appear, with all summaries missing.
pub fn aggregate_monthly(
    series: &DailySeries,
    dry_threshold_mm: f64,
) -> Result<Vec<MonthlyAggregate>> {
    if dry_threshold_mm < 0.0 {
        return Err(Error::invalid("dry threshold must be >= 0"));
    }
    let mut by_month: BTreeMap<(i32, u32), BTreeMap<u32, f64>> = BTreeMap::new();
    for r in &series.records {
        let key = (r.date.year(), r.date.month());
        let entry = by_month.entry(key).or_default();
        if let Some(v) = r.precip_mm {
            entry.insert(r.date.day(), v);
        }
    }
    let mut out = Vec::with_capacity(by_month.len());
    for ((year, month), days) in by_month {
        let n_days = days_in_month(year, month);
        let mut observed = 0u32;
        let mut sum = 0.0;
        let mut max: Option<f64> = None;
        let mut dry = 0u32;
        let mut run = 0u32;
        let mut run_max = 0u32;
        for day in 1..=n_days {
            match days.get(&day) {
                Some(&v) => {
                    observed += 1;
                    sum += v;
                    max = Some(max.map_or(v, |m: f64| m.max(v)));
                    if v <= dry_threshold_mm {
                        dry += 1;
                        run += 1;
                        run_max = run_max.max(run);
                    } else {
                        run = 0;
                    }
                }
                None => run = 0,
            }
        }
        if observed == 0 {
            out.push(MonthlyAggregate {
                year,
                month,
                dry_spell_max: None,
                rain_max: None,
                rain_mean: None,
                dry_day_count: None,
                days_observed: 0,
            });
        } else {
            out.push(MonthlyAggregate {
                year,
                month,
                dry_spell_max: Some(run_max),
                rain_max: max,
                rain_mean: Some(sum / observed as f64),
                dry_day_count: Some(dry),
                days_observed: observed,
            });
        }
    }
    Ok(out)
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .expect("valid month");
    next.signed_duration_since(first).num_days() as u32
}

/// Remove the mean from a coordinate list; returns the centred coordinates
/// and the removed (lon_mean, lat_mean) so other point sets (mesh nodes,
/// prediction grids) can be centred identically.
pub fn centre_coordinates(coords: &[(f64, f64)]) -> Result<(Vec<(f64, f64)>, (f64, f64))> {
    if coords.is_empty() {
        return Err(Error::data("cannot centre an empty coordinate list"));
    }
    let n = coords.len() as f64;
    let lon_mean = coords.iter().map(|c| c.0).sum::<f64>() / n;
    let lat_mean = coords.iter().map(|c| c.1).sum::<f64>() / n;
    let centred = coords
        .iter()
        .map(|&(lon, lat)| (lon - lon_mean, lat - lat_mean))
        .collect();
    Ok((centred, (lon_mean, lat_mean)))
}

/// One row of the aggregated dataset (Table-1 layout plus the dry-day and
/// trial-count columns used by the binomial scenario).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub lon_centred: f64,
    pub lat_centred: f64,
    pub elevation_km: f64,
    pub year: i32,
    pub month: u32,
    pub dry_spell_max: Option<u32>,
    pub rain_max: Option<f64>,
    pub rain_mean: Option<f64>,
    pub dry_day_count: Option<u32>,
    pub days_observed: u32,
}

impl StationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.month) {
            return Err(Error::data(format!("month {} out of range", self.month)));
        }
        if let Some(d) = self.dry_spell_max {
            if d > self.days_observed {
                return Err(Error::data(format!(
                    "{}: dry spell {d} exceeds days observed {}",
                    self.station_id, self.days_observed
                )));
            }
        }
        if let Some(d) = self.dry_day_count {
            if d > self.days_observed {
                return Err(Error::data(format!(
                    "{}: dry days {d} exceed days observed {}",
                    self.station_id, self.days_observed
                )));
            }
        }
        if self.rain_mean.is_some_and(|v| v < 0.0) {
            return Err(Error::data(format!("{}: negative mean rain", self.station_id)));
        }
        if let (Some(mx), Some(mn)) = (self.rain_max, self.rain_mean) {
            if mx < mn {
                return Err(Error::data(format!(
                    "{}: max rain {mx} below mean rain {mn}",
                    self.station_id
                )));
            }
        }
        Ok(())
    }
}

const TABLE1_HEADER: &[&str] = &[
    "Station",
    "Long.cent",
    "Lat.cent",
    "Elev.",
    "Year",
    "Month",
    "Dry spell",
    "Max rain",
    "Mean rain",
    "Dry days",
    "Days obs",
];

fn na_or<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_na<T: std::str::FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    let s = s.trim();
    if s == "NA" || s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>()
        .map(Some)
        .map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
}

fn parse_req<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("bad {what}: {:?}", s.trim())))
}

/// Write the aggregated dataset in the Table-1 column layout (CSV, `NA` for
/// missing values).
pub fn write_station_records(w: impl Write, records: &[StationRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TABLE1_HEADER)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in records {
        wtr.write_record(&[
            r.station_id.clone(),
            r.lon_centred.to_string(),
            r.lat_centred.to_string(),
            r.elevation_km.to_string(),
            r.year.to_string(),
            r.month.to_string(),
            na_or(r.dry_spell_max),
            na_or(r.rain_max),
            na_or(r.rain_mean),
            na_or(r.dry_day_count),
            r.days_observed.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a Table-1 dataset. Plain nine-column files are accepted: the trial
/// count then defaults to the calendar month length and dry days to missing.
pub fn read_station_records(r: impl Read) -> Result<Vec<StationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let ncols = headers.len();
    if ncols != 9 && ncols != 11 {
        return Err(Error::Parse(format!(
            "expected 9 or 11 Table-1 columns, found {ncols}"
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let year: i32 = parse_req(&rec[4], "Year")?;
        let month: u32 = parse_req(&rec[5], "Month")?;
        let row = StationRecord {
            station_id: rec[0].trim().to_string(),
            lon_centred: parse_req(&rec[1], "Long.cent")?,
            lat_centred: parse_req(&rec[2], "Lat.cent")?,
            elevation_km: parse_req(&rec[3], "Elev.")?,
            year,
            month,
            dry_spell_max: parse_na(&rec[6], "Dry spell")?,
            rain_max: parse_na(&rec[7], "Max rain")?,
            rain_mean: parse_na(&rec[8], "Mean rain")?,
            dry_day_count: if ncols == 11 {
                parse_na(&rec[9], "Dry days")?
            } else {
                None
            },
            days_observed: if ncols == 11 {
                parse_req(&rec[10], "Days obs")?
            } else {
                days_in_month(year, month)
            },
        };
        row.validate()?;
        out.push(row);
    }
    Ok(out)
}

/// Read raw daily input (`station_id,date,precip_mm`; ISO-8601 dates, `NA`
/// or empty for missing). Returns one series per station in first-appearance
/// order.
pub fn read_daily(r: impl Read) -> Result<Vec<DailySeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut order: Vec<String> = Vec::new();
    let mut by_station: BTreeMap<String, Vec<DailyRecord>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() < 3 {
            return Err(Error::Parse("daily rows need station_id,date,precip_mm".into()));
        }
        let id = rec[0].trim().to_string();
        let date = NaiveDate::parse_from_str(rec[1].trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse(format!("bad date {:?}: {e}", &rec[1])))?;
        let precip: Option<f64> = parse_na(&rec[2], "precip_mm")?;
        if !by_station.contains_key(&id) {
            order.push(id.clone());
        }
        by_station.entry(id).or_default().push(DailyRecord {
            date,
            precip_mm: precip,
        });
    }
    order
        .into_iter()
        .map(|id| {
            let recs = by_station.remove(&id).unwrap();
            DailySeries::new(id, recs)
        })
        .collect()
}

/// Station metadata for daily ingestion: `station_id,lon,lat`.
pub fn read_station_meta(r: impl Read) -> Result<Vec<(String, f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() < 3 {
            return Err(Error::Parse("station rows need station_id,lon,lat".into()));
        }
        out.push((
            rec[0].trim().to_string(),
            parse_req(&rec[1], "lon")?,
            parse_req(&rec[2], "lat")?,
        ));
    }
    Ok(out)
}

/// Rectangular elevation grid in ESRI ASCII format. Values are kilometres;
/// the first data row is the northernmost.
#[derive(Debug, Clone)]
pub struct ElevationRaster {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    /// row-major from the top row
    values: Vec<f64>,
}

impl ElevationRaster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata_value: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if ncols == 0 || nrows == 0 || cellsize <= 0.0 {
            return Err(Error::invalid("raster needs positive dimensions and cell size"));
        }
        if values.len() != ncols * nrows {
            return Err(Error::Dimension(format!(
                "raster expects {} values, got {}",
                ncols * nrows,
                values.len()
            )));
        }
        Ok(ElevationRaster {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata_value,
            values,
        })
    }

    /// Cell value by (row from top, col); `None` for nodata.
    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.ncols + col];
        (v != self.nodata_value).then_some(v)
    }

    /// Cell-centre coordinates of (row from top, col).
    pub fn cell_centre(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xllcorner + (col as f64 + 0.5) * self.cellsize,
            self.yllcorner + (self.nrows - row - 1) as f64 * self.cellsize + 0.5 * self.cellsize,
        )
    }

    /// Full raster extent (xmin, xmax, ymin, ymax).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.xllcorner,
            self.xllcorner + self.ncols as f64 * self.cellsize,
            self.yllcorner,
            self.yllcorner + self.nrows as f64 * self.cellsize,
        )
    }

    /// Bilinear interpolation at (lon, lat) from the four surrounding cell
    /// centres; missing cells are excluded with weight renormalization.
    /// Errors if the point lies outside the raster extent; `None` when all
    /// four neighbours are missing.
    pub fn elevation_at(&self, lon: f64, lat: f64) -> Result<Option<f64>> {
        let (xmin, xmax, ymin, ymax) = self.extent();
        if lon < xmin || lon > xmax || lat < ymin || lat > ymax {
            return Err(Error::OutsideRaster { lon, lat });
        }
        Ok(self.bilinear(lon, lat))
    }

    fn bilinear(&self, lon: f64, lat: f64) -> Option<f64> {
        // continuous position in cell-centre coordinates, rows from bottom
        let gx = (lon - self.xllcorner) / self.cellsize - 0.5;
        let gy = (lat - self.yllcorner) / self.cellsize - 0.5;
        let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        let j0 = clamp(gx.floor(), self.ncols - 1);
        let j1 = (j0 + 1).min(self.ncols - 1);
        let i0 = clamp(gy.floor(), self.nrows - 1);
        let i1 = (i0 + 1).min(self.nrows - 1);
        let fx = (gx - j0 as f64).clamp(0.0, 1.0);
        let fy = (gy - i0 as f64).clamp(0.0, 1.0);
        // i counts from the bottom; storage rows count from the top
        let at = |i_bottom: usize, j: usize| self.cell(self.nrows - 1 - i_bottom, j);
        let corners = [
            (at(i0, j0), (1.0 - fx) * (1.0 - fy)),
            (at(i0, j1), fx * (1.0 - fy)),
            (at(i1, j0), (1.0 - fx) * fy),
            (at(i1, j1), fx * fy),
        ];
        let mut wsum = 0.0;
        let mut vsum = 0.0;
        for (v, w) in corners {
            if let Some(v) = v {
                wsum += w;
                vsum += w * v;
            }
        }
        (wsum > 0.0).then(|| vsum / wsum)
    }

    /// Bilinear value with the query point clamped into the raster extent;
    /// if the clamped neighbourhood is nodata, falls back to the nearest
    /// non-missing cell. `None` only when the raster holds no data at all.
    pub fn elevation_clamped(&self, lon: f64, lat: f64) -> Option<f64> {
        let (xmin, xmax, ymin, ymax) = self.extent();
        let cl = lon.clamp(xmin, xmax);
        let ct = lat.clamp(ymin, ymax);
        if let Some(v) = self.bilinear(cl, ct) {
            return Some(v);
        }
        // nearest non-missing cell centre
        let mut best: Option<(f64, f64)> = None;
        for row in 0..self.nrows {
            for col in 0..self.ncols {
                if let Some(v) = self.cell(row, col) {
                    let (cx, cy) = self.cell_centre(row, col);
                    let d2 = (cx - cl).powi(2) + (cy - ct).powi(2);
                    if best.is_none_or(|(bd, _)| d2 < bd) {
                        best = Some((d2, v));
                    }
                }
            }
        }
        best.map(|(_, v)| v)
    }

    /// (min, max) over non-missing cells.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for v in &self.values {
            if *v != self.nodata_value {
                range = Some(match range {
                    None => (*v, *v),
                    Some((lo, hi)) => (lo.min(*v), hi.max(*v)),
                });
            }
        }
        range
    }

    /// Parse the plain-text grid format (`ncols`, `nrows`, `xllcorner`,
    /// `yllcorner`, `cellsize`, `nodata_value` header, then row-major values).
    pub fn read(r: impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut header: BTreeMap<String, f64> = BTreeMap::new();
        let mut values = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let first = parts.next().unwrap();
            if first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let key = first.to_ascii_lowercase();
                let val: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("raster header {key} missing value")))?
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad raster header value for {key}")))?;
                header.insert(key, val);
            } else {
                values.push(
                    first
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad raster value {first:?}")))?,
                );
                for p in parts {
                    values.push(
                        p.parse::<f64>()
                            .map_err(|_| Error::Parse(format!("bad raster value {p:?}")))?,
                    );
                }
            }
        }
        let get = |k: &str| -> Result<f64> {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("raster header missing {k}")))
        };
        ElevationRaster::new(
            get("ncols")? as usize,
            get("nrows")? as usize,
            get("xllcorner")?,
            get("yllcorner")?,
            get("cellsize")?,
            header.get("nodata_value").copied().unwrap_or(-9999.0),
            values,
        )
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "ncols {}", self.ncols)?;
        writeln!(w, "nrows {}", self.nrows)?;
        writeln!(w, "xllcorner {}", self.xllcorner)?;
        writeln!(w, "yllcorner {}", self.yllcorner)?;
        writeln!(w, "cellsize {}", self.cellsize)?;
        writeln!(w, "nodata_value {}", self.nodata_value)?;
        for row in 0..self.nrows {
            let line: Vec<String> = (0..self.ncols)
                .map(|c| self.values[row * self.ncols + c].to_string())
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}
