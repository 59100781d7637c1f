//! Flat `key = value` run configuration.
//!
//! Values come from an optional config file and are overridden by flags.
//! The resolved map (defaults included) is what every artifact echoes, so
//! execution-only settings (`out`, `threads`, `format`, `config`) are kept
//! out of it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use oprisk::ingest::{parse_amount, Cents, WeekRule};

use crate::error::CliError;

/// Every key the config file may contain.
pub const KNOWN_KEYS: &[&str] = &[
    "input",
    "model",
    "week_rule",
    "reporting_floor",
    "k_method",
    "k",
    "k_grid",
    "gammas",
    "network",
    "network_p",
    "network_q",
    "network_count",
    "networks",
    "scenario",
    "n",
    "m",
    "failure_budget",
    "permutations",
    "u",
    "v",
    "seed",
];

pub fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_").to_ascii_lowercase()
}

/// Parses the flat config format: one `key = value` per line, `#` starts a
/// comment, blank lines ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value", no + 1)))?;
        let key = normalize_key(k);
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Validation(format!("config line {}: unknown key {key:?}", no + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config_text(&text)
}

/// Raw settings plus the subset actually consumed by a command.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    raw: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(raw: BTreeMap<String, String>) -> Self {
        Settings { raw, resolved: BTreeMap::new() }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.raw.contains_key(key)
    }

    /// Keys that were supplied but not consumed.
    pub fn unused(&self) -> Vec<&str> {
        self.raw.keys().filter(|k| !self.resolved.contains_key(*k)).map(|k| k.as_str()).collect()
    }

    fn take(&mut self, key: &str, default: Option<&str>) -> Option<String> {
        let v = self.raw.get(key).cloned().or_else(|| default.map(str::to_string))?;
        self.resolved.insert(key.to_string(), v.clone());
        Some(v)
    }

    pub fn string(&mut self, key: &str, default: &str) -> String {
        self.take(key, Some(default)).unwrap_or_default()
    }

    pub fn optional_string(&mut self, key: &str) -> Option<String> {
        self.take(key, None)
    }

    pub fn required_string(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key, None)
            .ok_or_else(|| CliError::Validation(format!("missing required setting `{key}`")))
    }

    pub fn parsed<T>(&mut self, key: &str, default: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.string(key, default);
        parse_value(key, &v)
    }

    pub fn optional_parsed<T>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.optional_string(key).map(|v| parse_value(key, &v)).transpose()
    }

    /// Records a value that was chosen rather than supplied.
    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn input_path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        let p = PathBuf::from(self.required_string(key)?);
        existing(p)
    }

    pub fn optional_input_path(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        self.optional_string(key).map(|s| existing(PathBuf::from(s))).transpose()
    }

    pub fn week_rule(&mut self) -> Result<WeekRule, CliError> {
        let v = self.string("week_rule", "iso");
        parse_week_rule(&v)
    }

    pub fn reporting_floor(&mut self) -> Result<Cents, CliError> {
        let v = self.string("reporting_floor", "0");
        if v.trim().parse::<f64>() == Ok(0.0) {
            return Ok(0);
        }
        parse_amount(&v).map_err(|e| CliError::Validation(format!("reporting_floor: {e}")))
    }

    /// `seed` if given, otherwise a fresh one that is then recorded.
    pub fn seed(&mut self) -> Result<u64, CliError> {
        match self.optional_parsed::<u64>("seed")? {
            Some(s) => Ok(s),
            None => {
                let s = fresh_seed();
                log::info!("no seed given, using {s}");
                self.record("seed", s);
                Ok(s)
            }
        }
    }

    pub fn f64_list(&mut self, key: &str, default: &str) -> Result<Vec<f64>, CliError> {
        let v = self.string(key, default);
        v.split(',').map(|s| parse_value::<f64>(key, s.trim())).collect()
    }

    pub fn k_grid(&mut self, default: &str) -> Result<Vec<usize>, CliError> {
        let v = self.string("k_grid", default);
        parse_k_grid(&v)
    }
}

fn existing(p: PathBuf) -> Result<PathBuf, CliError> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::Validation(format!("input file not found: {}", p.display())))
    }
}

fn parse_value<T>(key: &str, v: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| CliError::Validation(format!("{key} = {v:?}: {e}")))
}

fn fresh_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    oprisk::seed::child_seed(nanos, std::process::id() as u64, 0)
}

/// `iso` or `anchored:YYYY-MM-DD`.
pub fn parse_week_rule(v: &str) -> Result<WeekRule, CliError> {
    if v.eq_ignore_ascii_case("iso") {
        return Ok(WeekRule::Iso);
    }
    if let Some(d) = v.strip_prefix("anchored:") {
        let epoch = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
            .map_err(|e| CliError::Validation(format!("week_rule anchor {d:?}: {e}")))?;
        return Ok(WeekRule::Anchored { epoch });
    }
    Err(CliError::Validation(format!("week_rule {v:?}: expected iso or anchored:YYYY-MM-DD")))
}

/// Comma list (`50,100,150`) or inclusive range `start:stop:step`.
pub fn parse_k_grid(v: &str) -> Result<Vec<usize>, CliError> {
    let bad = |msg: &str| CliError::Validation(format!("k_grid {v:?}: {msg}"));
    let grid: Vec<usize> = if v.contains(':') {
        let parts: Vec<&str> = v.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad("range form is start:stop:step"));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| bad("not an integer")))
            .collect::<Result<_, _>>()?;
        let (a, b, s) = (nums[0], nums[1], nums[2]);
        if s == 0 {
            return Err(bad("step must be positive"));
        }
        if a <= b {
            (a..=b).step_by(s).collect()
        } else {
            let mut g: Vec<usize> = (b..=a).rev().step_by(s).collect();
            g.dedup();
            g
        }
    } else {
        v.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad("not an integer")))
            .collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(bad("needs at least one positive value"));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text() {
        let m = parse_config_text("# run\ninput = a.csv\nk-method=mvr  # inline\n\n").unwrap();
        assert_eq!(m["input"], "a.csv");
        assert_eq!(m["k_method"], "mvr");
        assert!(parse_config_text("bogus = 1").is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(parse_k_grid("200:10:10").unwrap().len(), 20);
        assert_eq!(parse_k_grid("200:10:10").unwrap()[0], 200);
        assert_eq!(parse_k_grid("10:30:10").unwrap(), vec![10, 20, 30]);
        assert_eq!(parse_k_grid("5, 7").unwrap(), vec![5, 7]);
        assert!(parse_k_grid("0,5").is_err());
        assert!(parse_k_grid("1:2").is_err());
    }

    #[test]
    fn week_rules() {
        assert_eq!(parse_week_rule("iso").unwrap(), WeekRule::Iso);
        assert!(matches!(parse_week_rule("anchored:2020-01-02").unwrap(), WeekRule::Anchored { .. }));
        assert!(parse_week_rule("monthly").is_err());
    }

    #[test]
    fn resolution_tracks_consumed_keys() {
        let mut raw = BTreeMap::new();
        raw.insert("k".to_string(), "40".to_string());
        raw.insert("scenario".to_string(), "2".to_string());
        let mut s = Settings::new(raw);
        assert_eq!(s.parsed::<usize>("k", "10").unwrap(), 40);
        assert_eq!(s.parsed::<usize>("n", "1000").unwrap(), 1000);
        assert_eq!(s.resolved().len(), 2);
        assert_eq!(s.unused(), vec!["scenario"]);
    }
}
