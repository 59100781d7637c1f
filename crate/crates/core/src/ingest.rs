//! Raw loss records, weekly aggregation and network fraction matrices.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_EVENT_TYPES: usize = 7;
pub const N_BUSINESS_LINES: usize = 8;

/// Integer euro cents; aggregation is exact.
pub type Cents = i64;

pub fn cents_to_eur(c: Cents) -> f64 {
    c as f64 / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossRecord {
    pub date: NaiveDate,
    pub amount: Cents,
    /// 1-based event type index.
    pub event_type: u8,
    /// 1-based business line index.
    pub business_line: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedLosses {
    pub records: Vec<LossRecord>,
    pub below_floor: usize,
}

/// Parses a decimal EUR amount ("12000", "12000.5", "12000.50") into cents.
pub fn parse_amount(s: &str) -> std::result::Result<Cents, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty amount".into());
    }
    if s.starts_with('-') {
        return Err(format!("amount must be positive, got {s}"));
    }
    let s = s.strip_prefix('+').unwrap_or(s);
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(format!("unparsable amount {s:?}"));
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(format!("unparsable amount {s:?}"));
    }
    let frac_trimmed = frac_part.trim_end_matches('0');
    if frac_trimmed.len() > 2 {
        return Err(format!("amount {s:?} has sub-cent precision"));
    }
    let whole: i64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| format!("amount {s:?} out of range"))?
    };
    let mut frac = frac_trimmed.to_string();
    while frac.len() < 2 {
        frac.push('0');
    }
    let frac: i64 = frac.parse().expect("two ascii digits");
    let cents = whole
        .checked_mul(100)
        .and_then(|w| w.checked_add(frac))
        .ok_or_else(|| format!("amount {s:?} out of range"))?;
    if cents <= 0 {
        return Err(format!("amount must be positive, got {s}"));
    }
    Ok(cents)
}

#[derive(Debug, Deserialize)]
struct RawRow {
    date: String,
    amount: String,
    event_type: String,
    business_line: String,
}

fn parse_index(s: &str, max: u8, what: &str) -> std::result::Result<u8, String> {
    let v: i64 = s
        .trim()
        .parse()
        .map_err(|_| format!("unparsable {what} {s:?}"))?;
    if v < 1 || v > max as i64 {
        return Err(format!("{what} out of range: {v} not in 1..={max}"));
    }
    Ok(v as u8)
}

/// Reads loss records from any CSV source with header
/// `date,amount,event_type,business_line`.
pub fn parse_loss_reader<R: Read>(reader: R, reporting_floor: Cents) -> Result<ParsedLosses> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["date", "amount", "event_type", "business_line"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        if headers.is_empty() {
            return Err(Error::EmptyInput);
        }
        return Err(Error::MalformedRow {
            row: 0,
            msg: format!("expected header {:?}, got {:?}", expected.join(","), headers),
        });
    }
    let mut out = ParsedLosses::default();
    let mut seen = 0usize;
    for (i, row) in rdr.deserialize::<RawRow>().enumerate() {
        let row_no = i + 1;
        let bad = |msg: String| Error::MalformedRow { row: row_no, msg };
        let raw = row.map_err(|e| bad(e.to_string()))?;
        seen += 1;
        let date = NaiveDate::parse_from_str(raw.date.trim(), "%Y-%m-%d")
            .map_err(|e| bad(format!("unparsable date {:?}: {e}", raw.date)))?;
        let amount = parse_amount(&raw.amount).map_err(bad)?;
        let event_type = parse_index(&raw.event_type, N_EVENT_TYPES as u8, "event_type").map_err(bad)?;
        let business_line =
            parse_index(&raw.business_line, N_BUSINESS_LINES as u8, "business_line").map_err(bad)?;
        if amount < reporting_floor {
            out.below_floor += 1;
            continue;
        }
        out.records.push(LossRecord {
            date,
            amount,
            event_type,
            business_line,
        });
    }
    if seen == 0 {
        return Err(Error::EmptyInput);
    }
    if out.below_floor > 0 {
        log::info!("{} records below the reporting floor were excluded", out.below_floor);
    }
    Ok(out)
}

pub fn parse_loss_csv(path: impl AsRef<Path>, reporting_floor: Cents) -> Result<ParsedLosses> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_loss_reader(std::io::BufReader::new(file), reporting_floor)
}

/// Writes records with the header `date,amount,event_type,business_line`.
pub fn write_loss_csv<W: std::io::Write>(records: &[LossRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "amount", "event_type", "business_line"])?;
    for r in records {
        let amount = format!("{}.{:02}", r.amount / 100, r.amount % 100);
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            amount,
            r.event_type.to_string(),
            r.business_line.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Week bucketing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum WeekRule {
    /// ISO-8601 weeks, identified by their Monday.
    #[default]
    Iso,
    /// Consecutive 7-day buckets anchored at `epoch`.
    Anchored { epoch: NaiveDate },
}

impl WeekRule {
    /// First day of the bucket containing `date`.
    pub fn week_start(&self, date: NaiveDate) -> NaiveDate {
        match *self {
            WeekRule::Iso => date - Duration::days(date.weekday().num_days_from_monday() as i64),
            WeekRule::Anchored { epoch } => {
                let offset = (date - epoch).num_days().div_euclid(7);
                epoch + Duration::days(offset * 7)
            }
        }
    }
}

/// Weekly ET-BL loss matrices; rows are business lines, columns event types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyPanel {
    pub rule: WeekRule,
    pub weeks: Vec<NaiveDate>,
    pub losses: Vec<Array2<Cents>>,
}

impl WeeklyPanel {
    pub fn n_weeks(&self) -> usize {
        self.weeks.len()
    }

    pub fn total(&self, week: usize) -> Cents {
        self.losses[week].sum()
    }

    /// Column sums of week `w`, in cents.
    pub fn et_vector(&self, week: usize) -> Array1<Cents> {
        self.losses[week].sum_axis(ndarray::Axis(0))
    }

    /// Row sums of week `w`, in cents.
    pub fn bl_vector(&self, week: usize) -> Array1<Cents> {
        self.losses[week].sum_axis(ndarray::Axis(1))
    }

    /// Event-type observations in EUR, one row per week.
    pub fn et_observations(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.n_weeks(), N_EVENT_TYPES));
        for w in 0..self.n_weeks() {
            for (j, v) in self.et_vector(w).iter().enumerate() {
                x[[w, j]] = cents_to_eur(*v);
            }
        }
        x
    }
}

pub fn aggregate_weekly(records: &[LossRecord], rule: WeekRule) -> Result<WeeklyPanel> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut buckets: BTreeMap<NaiveDate, Array2<Cents>> = BTreeMap::new();
    for r in records {
        let cell = buckets
            .entry(rule.week_start(r.date))
            .or_insert_with(|| Array2::zeros((N_BUSINESS_LINES, N_EVENT_TYPES)));
        cell[[r.business_line as usize - 1, r.event_type as usize - 1]] += r.amount;
    }
    let first = *buckets.keys().next().expect("nonempty");
    let last = *buckets.keys().next_back().expect("nonempty");
    let mut weeks = Vec::new();
    let mut losses = Vec::new();
    let mut w = first;
    while w <= last {
        weeks.push(w);
        losses.push(
            buckets
                .remove(&w)
                .unwrap_or_else(|| Array2::zeros((N_BUSINESS_LINES, N_EVENT_TYPES))),
        );
        w += Duration::days(7);
    }
    debug_assert!(buckets.is_empty());
    Ok(WeeklyPanel { rule, weeks, losses })
}

/// Nonnegative matrix whose columns each sum to 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct FractionMatrix(Array2<f64>);

const COLUMN_SUM_TOL: f64 = 1e-12;

impl FractionMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("fraction matrix entries must be finite and nonnegative".into()));
        }
        for (j, col) in entries.columns().into_iter().enumerate() {
            let s: f64 = col.sum();
            if s.abs() > COLUMN_SUM_TOL && (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidInput(format!("column {} sums to {s}, expected 0 or 1", j + 1)));
            }
        }
        Ok(FractionMatrix(entries))
    }

    /// Normalizes each column of a loss matrix by its sum, with 0/0 := 0.
    pub fn from_losses(l: &Array2<Cents>) -> Self {
        let mut a = Array2::zeros(l.raw_dim());
        for (j, col) in l.columns().into_iter().enumerate() {
            let s: Cents = col.sum();
            if s > 0 {
                for (i, v) in col.iter().enumerate() {
                    a[[i, j]] = *v as f64 / s as f64;
                }
            }
        }
        FractionMatrix(a)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl TryFrom<Array2<f64>> for FractionMatrix {
    type Error = Error;
    fn try_from(a: Array2<f64>) -> Result<Self> {
        FractionMatrix::new(a)
    }
}

impl From<FractionMatrix> for Array2<f64> {
    fn from(f: FractionMatrix) -> Self {
        f.0
    }
}

pub fn fraction_matrices(panel: &WeeklyPanel) -> Vec<FractionMatrix> {
    panel.losses.iter().map(FractionMatrix::from_losses).collect()
}
