//! Temporal aggregation periods: the full study span, calendar quarters
//! and calendar months.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Period {
    /// The whole configured study span.
    Full,
    /// Calendar quarter, `q` in 1..=4 (Q1 = Jan-Mar).
    Quarter { year: i32, q: u8 },
    /// Calendar month, `month` in 1..=12.
    Month { year: i32, month: u8 },
}

impl Period {
    pub fn quarter_of(ts: DateTime<Utc>) -> Period {
        Period::Quarter {
            year: ts.year(),
            q: ((ts.month() - 1) / 3 + 1) as u8,
        }
    }

    pub fn month_of(ts: DateTime<Utc>) -> Period {
        Period::Month {
            year: ts.year(),
            month: ts.month() as u8,
        }
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        match *self {
            Period::Full => true,
            Period::Quarter { year, q } => {
                ts.year() == year && ((ts.month() - 1) / 3 + 1) as u8 == q
            }
            Period::Month { year, month } => ts.year() == year && ts.month() as u8 == month,
        }
    }

    /// Number of hours the period spans; `Full` takes the explicit study
    /// span length. Used for measurement-coverage thresholds.
    pub fn expected_hours(&self, full_span_hours: u64) -> u64 {
        match *self {
            Period::Full => full_span_hours,
            Period::Quarter { year, q } => {
                let months = [(q - 1) * 3 + 1, (q - 1) * 3 + 2, (q - 1) * 3 + 3];
                months
                    .iter()
                    .map(|&m| days_in_month(year, m as u32) as u64 * 24)
                    .sum()
            }
            Period::Month { year, month } => days_in_month(year, month as u32) as u64 * 24,
        }
    }
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    let first = chrono::NaiveDate::from_ymd_opt(year, month, 1).unwrap();
    let next = chrono::NaiveDate::from_ymd_opt(ny, nm, 1).unwrap();
    (next - first).num_days() as u32
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Period::Full => write!(f, "full"),
            Period::Quarter { year, q } => write!(f, "{year}-Q{q}"),
            Period::Month { year, month } => write!(f, "{year}-{month:02}"),
        }
    }
}

impl FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "full" {
            return Ok(Period::Full);
        }
        let bad = || Error::Format(format!("unrecognized period label '{s}'"));
        let (year_s, rest) = s.split_once('-').ok_or_else(bad)?;
        let year: i32 = year_s.parse().map_err(|_| bad())?;
        if let Some(q_s) = rest.strip_prefix('Q') {
            let q: u8 = q_s.parse().map_err(|_| bad())?;
            if !(1..=4).contains(&q) {
                return Err(bad());
            }
            Ok(Period::Quarter { year, q })
        } else {
            let month: u8 = rest.parse().map_err(|_| bad())?;
            if !(1..=12).contains(&month) {
                return Err(bad());
            }
            Ok(Period::Month { year, month })
        }
    }
}

impl TryFrom<String> for Period {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<Period> for String {
    fn from(p: Period) -> String {
        p.to_string()
    }
}
