//! Ground-station NO2 measurements: EEA-style export parsing, quality
//! filtering and per-period target aggregation.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::period::Period;

/// Minimum fraction of a period's expected hourly measurements required
/// for a usable target.
pub const MIN_COVERAGE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: DateTime<Utc>,
    /// NO2 concentration, ug/m^3.
    pub no2: f64,
    pub validity: i32,
    pub verification: i32,
}

/// A row that could not be parsed, kept for the rejects report.
#[derive(Debug, Clone, Serialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetValue {
    pub period: Period,
    /// Mean concentration over the period, ug/m^3.
    pub mean_no2: f64,
    pub n_measurements: usize,
}

/// Parse a delimiter-separated station export. Expected columns (any
/// order, extra columns ignored): station_id, lat, lon, timestamp
/// (RFC 3339), no2, validity, verification. Malformed rows land in the
/// rejects report instead of being silently dropped.
pub fn parse_station_file(path: &Path) -> Result<(Vec<StationRecord>, Vec<RejectedRow>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(format!("{}: missing column '{name}'", path.display())))
    };
    let c_id = col("station_id")?;
    let c_lat = col("lat")?;
    let c_lon = col("lon")?;
    let c_ts = col("timestamp")?;
    let c_no2 = col("no2")?;
    let c_val = col("validity")?;
    let c_ver = col("verification")?;

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&row, c_id, c_lat, c_lon, c_ts, c_no2, c_val, c_ver) {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(RejectedRow { line, reason }),
        }
    }
    Ok((records, rejects))
}

#[allow(clippy::too_many_arguments)]
fn parse_row(
    row: &csv::StringRecord,
    c_id: usize,
    c_lat: usize,
    c_lon: usize,
    c_ts: usize,
    c_no2: usize,
    c_val: usize,
    c_ver: usize,
) -> std::result::Result<StationRecord, String> {
    let field = |i: usize, name: &str| row.get(i).ok_or(format!("missing field {name}"));
    let ts_raw = field(c_ts, "timestamp")?;
    let timestamp = DateTime::parse_from_rfc3339(ts_raw)
        .map_err(|e| format!("unparseable timestamp '{ts_raw}': {e}"))?
        .with_timezone(&Utc);
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        field(i, name)?
            .parse()
            .map_err(|_| format!("unparseable {name} '{}'", row.get(i).unwrap_or("")))
    };
    Ok(StationRecord {
        station_id: field(c_id, "station_id")?.to_string(),
        lat: num(c_lat, "lat")?,
        lon: num(c_lon, "lon")?,
        timestamp,
        no2: num(c_no2, "no2")?,
        validity: num(c_val, "validity")? as i32,
        verification: num(c_ver, "verification")? as i32,
    })
}

/// Retain exactly the records with validity = 1 and verification = 1.
/// Negative concentrations (instrument baseline artifacts) are removed
/// with them.
pub fn filter_quality(records: &[StationRecord]) -> Vec<StationRecord> {
    records
        .iter()
        .filter(|r| r.validity == 1 && r.verification == 1 && r.no2 >= 0.0)
        .cloned()
        .collect()
}

/// Mean NO2 over the station's measurements inside `period`. Rejects
/// periods with zero measurements or coverage below
/// `min_coverage_fraction` of the expected hourly count.
pub fn aggregate_target(
    records: &[StationRecord],
    station_id: &str,
    period: Period,
    full_span_hours: u64,
    min_coverage_fraction: f64,
) -> Result<TargetValue> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.station_id == station_id && period.contains(r.timestamp))
        .map(|r| r.no2)
        .collect();
    if values.is_empty() {
        return Err(Error::InsufficientCoverage(format!(
            "{station_id}: no measurements in {period}"
        )));
    }
    let expected = period.expected_hours(full_span_hours) as f64;
    let coverage = values.len() as f64 / expected.max(1.0);
    if coverage < min_coverage_fraction {
        return Err(Error::InsufficientCoverage(format!(
            "{station_id}: {} of {} expected measurements in {period} ({:.1}% < {:.1}%)",
            values.len(),
            expected,
            coverage * 100.0,
            min_coverage_fraction * 100.0
        )));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!(
            "{station_id}: non-finite mean in {period}"
        )));
    }
    Ok(TargetValue {
        period,
        mean_no2: mean,
        n_measurements: values.len(),
    })
}

/// Write targets as a tabular file: station_id, period, mean, count.
pub fn write_targets(
    path: &Path,
    targets: &[(String, TargetValue)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["station_id", "period", "mean_no2", "n_measurements"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (station_id, t) in targets {
        w.write_record([
            station_id.as_str(),
            &t.period.to_string(),
            &format!("{}", t.mean_no2),
            &t.n_measurements.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_targets(path: &Path) -> Result<Vec<(String, TargetValue)>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let get = |i: usize| row.get(i).ok_or_else(|| Error::Format("short row".into()));
        out.push((
            get(0)?.to_string(),
            TargetValue {
                period: get(1)?.parse()?,
                mean_no2: get(2)?
                    .parse()
                    .map_err(|_| Error::Format("bad mean_no2".into()))?,
                n_measurements: get(3)?
                    .parse()
                    .map_err(|_| Error::Format("bad n_measurements".into()))?,
            },
        ));
    }
    Ok(out)
}
