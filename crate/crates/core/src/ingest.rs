//! Loading, imputation, and standardization of univariate series.
//!
//! Three on-disk layouts are understood:
//!
//! * `generic_csv`: header `value` or `timestamp,value`, one row per step.
//! * `nab`: `timestamp,value` rows; labels are a JSON map from series key
//!   (`category/file.csv`) to `[start_timestamp, end_timestamp]` windows.
//! * `nasa`: a single value column, optional header; labels are a CSV of
//!   `series_id,start_index,end_index` rows with inclusive end.
//!
//! Missing values (empty field or `NaN`) are carried as `f64::NAN` until
//! [`impute_missing`] runs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{normalize_ranges, Interval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<i64>>,
    pub label_ranges: Option<Vec<Interval>>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        TimeSeries {
            id: id.into(),
            values,
            timestamps: None,
            label_ranges: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    pub fn with_labels(mut self, ranges: Vec<Interval>) -> Result<Self> {
        self.label_ranges = Some(normalize_ranges(ranges, self.len())?);
        Ok(self)
    }

    /// Checks the structural invariants (nonempty, increasing timestamps, sane labels).
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid(format!("series '{}' is empty", self.id)));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.values.len() {
                return Err(Error::invalid(format!(
                    "series '{}' has {} timestamps for {} values",
                    self.id,
                    ts.len(),
                    self.values.len()
                )));
            }
            if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::invalid(format!(
                    "series '{}': timestamps not strictly increasing at row {}",
                    self.id,
                    i + 1
                )));
            }
        }
        if let Some(r) = &self.label_ranges {
            normalize_ranges(r.clone(), self.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Nab,
    Nasa,
    GenericCsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nab" => Ok(Format::Nab),
            "nasa" => Ok(Format::Nasa),
            "generic_csv" | "generic" | "csv" => Ok(Format::GenericCsv),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

impl Format {
    pub fn as_str(&self) -> &'static str {
        match self {
            Format::Nab => "nab",
            Format::Nasa => "nasa",
            Format::GenericCsv => "generic_csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: f64,
    pub std: f64,
}

impl StandardizationParams {
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    #[default]
    Linear,
    Ffill,
}

impl FromStr for ImputePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ImputePolicy::Linear),
            "ffill" => Ok(ImputePolicy::Ffill),
            other => Err(Error::Config(format!("unknown impute policy '{other}'"))),
        }
    }
}

/// Derives the identifier a series is keyed by in label files and outputs.
///
/// NAB keys are `category/file.csv`; everything else uses the file stem.
pub fn series_id(path: &Path, format: Format) -> String {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        Format::Nab => match path.parent().and_then(|p| p.file_name()) {
            Some(dir) => format!("{}/{}", dir.to_string_lossy(), file),
            None => file,
        },
        _ => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(file),
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_value(field: &str) -> std::result::Result<f64, String> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    f.parse::<f64>()
        .map_err(|_| format!("cannot parse value '{f}'"))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value '{f}'"))
            }
        })
}

/// Parses integer epoch seconds or `YYYY-MM-DD HH:MM:SS[.ffffff]` (taken as UTC).
pub fn parse_timestamp(field: &str) -> std::result::Result<i64, String> {
    let f = field.trim();
    if let Ok(v) = f.parse::<i64>() {
        return Ok(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(f, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(format!("cannot parse timestamp '{f}'"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn load_two_column(path: &Path, text: &str, require_ts: bool) -> Result<(Vec<f64>, Option<Vec<i64>>)> {
    let mut rdr = csv_reader(text);
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut value_col = None;
    let mut ts_col = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| format_err(path, line, e.to_string()))?;
        if value_col.is_none() {
            let names: Vec<String> = rec.iter().map(|s| s.to_ascii_lowercase()).collect();
            value_col = names.iter().position(|n| n == "value");
            ts_col = names.iter().position(|n| n == "timestamp");
            if value_col.is_none() {
                return Err(format_err(path, line, "header must contain a 'value' column"));
            }
            if require_ts && ts_col.is_none() {
                return Err(format_err(path, line, "header must contain 'timestamp,value'"));
            }
            continue;
        }
        let vc = value_col.unwrap_or(0);
        let field = rec.get(vc).ok_or_else(|| format_err(path, line, "missing value field"))?;
        values.push(parse_value(field).map_err(|m| format_err(path, line, m))?);
        if let Some(tc) = ts_col {
            let field = rec
                .get(tc)
                .ok_or_else(|| format_err(path, line, "missing timestamp field"))?;
            stamps.push(parse_timestamp(field).map_err(|m| format_err(path, line, m))?);
        }
    }
    if value_col.is_none() {
        return Err(format_err(path, 1, "missing header"));
    }
    let ts = ts_col.map(|_| stamps);
    Ok((values, ts))
}

fn load_single_column(path: &Path, text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let field = raw.split(',').next().unwrap_or("").trim();
        let is_header = i == 0
            && !field.is_empty()
            && !field.eq_ignore_ascii_case("nan")
            && field.parse::<f64>().is_err();
        if is_header {
            continue;
        }
        values.push(parse_value(field).map_err(|m| format_err(path, line, m))?);
    }
    Ok(values)
}

/// Reads one series file. Labels are attached separately with [`LabelSet::attach`].
pub fn load_series(path: &Path, format: Format) -> Result<TimeSeries> {
    let text = read_text(path)?;
    let id = series_id(path, format);
    let (values, timestamps) = match format {
        Format::GenericCsv => load_two_column(path, &text, false)?,
        Format::Nab => load_two_column(path, &text, true)?,
        Format::Nasa => (load_single_column(path, &text)?, None),
    };
    if values.is_empty() {
        return Err(Error::invalid(format!("{}: series is empty", path.display())));
    }
    let series = TimeSeries {
        id,
        values,
        timestamps,
        label_ranges: None,
    };
    series.validate()?;
    Ok(series)
}

/// Loads a series and, when `labels` is given, its known anomaly ranges.
pub fn load_labeled(path: &Path, format: Format, labels: Option<&LabelSet>) -> Result<TimeSeries> {
    let series = load_series(path, format)?;
    match labels {
        Some(l) => l.attach(series),
        None => Ok(series),
    }
}

/// Ground-truth anomaly windows keyed by series id.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSet {
    /// Timestamp windows, inclusive at both ends (NAB).
    Timestamps(HashMap<String, Vec<(i64, i64)>>),
    /// Half-open index ranges.
    Indices(HashMap<String, Vec<Interval>>),
}

impl LabelSet {
    pub fn load(path: &Path, format: Format) -> Result<LabelSet> {
        let text = read_text(path)?;
        match format {
            Format::Nab => parse_nab_labels(path, &text),
            Format::Nasa | Format::GenericCsv => parse_index_labels(path, &text),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = match self {
            LabelSet::Timestamps(m) => m.keys().cloned().collect(),
            LabelSet::Indices(m) => m.keys().cloned().collect(),
        };
        ids.sort();
        ids
    }

    fn lookup_key<'a, V>(map: &'a HashMap<String, V>, id: &str) -> Option<&'a V> {
        if let Some(v) = map.get(id) {
            return Some(v);
        }
        let file = id.rsplit('/').next().unwrap_or(id);
        let mut hits = map
            .iter()
            .filter(|(k, _)| k.rsplit('/').next() == Some(file));
        match (hits.next(), hits.next()) {
            (Some((_, v)), None) => Some(v),
            _ => None,
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        match self {
            LabelSet::Timestamps(m) => Self::lookup_key(m, id).is_some(),
            LabelSet::Indices(m) => Self::lookup_key(m, id).is_some(),
        }
    }

    /// Index ranges for `series`; a series absent from the label file has none.
    pub fn ranges_for(&self, series: &TimeSeries) -> Result<Vec<Interval>> {
        let ranges = match self {
            LabelSet::Indices(m) => Self::lookup_key(m, &series.id).cloned().unwrap_or_default(),
            LabelSet::Timestamps(m) => {
                let windows = Self::lookup_key(m, &series.id).cloned().unwrap_or_default();
                let ts = match (&series.timestamps, windows.is_empty()) {
                    (_, true) => return Ok(Vec::new()),
                    (Some(ts), _) => ts,
                    (None, _) => {
                        return Err(Error::invalid(format!(
                            "series '{}' has timestamp labels but no timestamps",
                            series.id
                        )))
                    }
                };
                let mut out = Vec::new();
                for (a, b) in windows {
                    let start = ts.partition_point(|&t| t < a);
                    let end = ts.partition_point(|&t| t <= b);
                    if start < end {
                        out.push(Interval { start, end });
                    }
                }
                out
            }
        };
        normalize_ranges(ranges, series.len())
    }

    pub fn attach(&self, series: TimeSeries) -> Result<TimeSeries> {
        let ranges = self.ranges_for(&series)?;
        series.with_labels(ranges)
    }
}

fn parse_nab_labels(path: &Path, text: &str) -> Result<LabelSet> {
    let raw: HashMap<String, Vec<Vec<String>>> =
        serde_json::from_str(text).map_err(|e| format_err(path, e.line(), e.to_string()))?;
    let mut out = HashMap::new();
    for (key, windows) in raw {
        let mut parsed = Vec::with_capacity(windows.len());
        for w in windows {
            if w.len() != 2 {
                return Err(format_err(path, 0, format!("window for '{key}' must have two timestamps")));
            }
            let a = parse_timestamp(&w[0]).map_err(|m| format_err(path, 0, m))?;
            let b = parse_timestamp(&w[1]).map_err(|m| format_err(path, 0, m))?;
            parsed.push((a, b));
        }
        out.insert(key, parsed);
    }
    Ok(LabelSet::Timestamps(out))
}

fn parse_index_labels(path: &Path, text: &str) -> Result<LabelSet> {
    let mut rdr = csv_reader(text);
    let mut out: HashMap<String, Vec<Interval>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| format_err(path, line, e.to_string()))?;
        if rec.len() < 3 {
            return Err(format_err(path, line, "expected series_id,start_index,end_index"));
        }
        let (id, a, b) = (&rec[0], &rec[1], &rec[2]);
        if i == 0 && a.parse::<usize>().is_err() {
            continue;
        }
        let start: usize = a
            .parse()
            .map_err(|_| format_err(path, line, format!("bad start index '{a}'")))?;
        let end_inclusive: usize = b
            .parse()
            .map_err(|_| format_err(path, line, format!("bad end index '{b}'")))?;
        if end_inclusive < start {
            return Err(format_err(path, line, "end index before start index"));
        }
        out.entry(id.to_string()).or_default().push(Interval {
            start,
            end: end_inclusive + 1,
        });
    }
    Ok(LabelSet::Indices(out))
}

/// Writes `series_id,start_index,end_index` rows (inclusive end) for the given ranges.
pub fn write_index_labels(path: &Path, rows: &[(String, Vec<Interval>)]) -> Result<()> {
    let mut text = String::from("series_id,start_index,end_index\n");
    for (id, ranges) in rows {
        for r in ranges {
            text.push_str(&format!("{id},{},{}\n", r.start, r.end - 1));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a `generic_csv` file (with timestamps when the series has them).
pub fn write_generic_csv(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut text = String::new();
    match &series.timestamps {
        Some(ts) => {
            text.push_str("timestamp,value\n");
            for (t, v) in ts.iter().zip(&series.values) {
                text.push_str(&format!("{t},{v}\n"));
            }
        }
        None => {
            text.push_str("value\n");
            for v in &series.values {
                text.push_str(&format!("{v}\n"));
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fills NaN gaps. Boundary gaps copy the nearest present value under either policy.
pub fn impute_missing(series: &TimeSeries, policy: ImputePolicy) -> Result<TimeSeries> {
    let v = &series.values;
    let present: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_finite()).collect();
    let (&first, &last) = match (present.first(), present.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::invalid(format!(
                "series '{}' has no present values",
                series.id
            )))
        }
    };
    let mut out = v.clone();
    out[..first].fill(v[first]);
    out[last + 1..].fill(v[last]);
    for pair in present.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b == a + 1 {
            continue;
        }
        for i in a + 1..b {
            out[i] = match policy {
                ImputePolicy::Ffill => v[a],
                ImputePolicy::Linear => {
                    let t = (i - a) as f64 / (b - a) as f64;
                    v[a] + t * (v[b] - v[a])
                }
            };
        }
    }
    Ok(TimeSeries {
        values: out,
        ..series.clone()
    })
}

/// Z-scores the series over its full length. A constant series keeps std = 1.
pub fn standardize(series: &TimeSeries) -> (TimeSeries, StandardizationParams) {
    let params = fit_standardization(&series.values);
    let values = params.apply(&series.values);
    (
        TimeSeries {
            values,
            ..series.clone()
        },
        params,
    )
}

pub fn fit_standardization(values: &[f64]) -> StandardizationParams {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let std = if std > 0.0 && std.is_finite() { std } else { 1.0 };
    StandardizationParams { mean, std }
}

/// Lists loadable series files directly inside `dir`, sorted by name.
pub fn list_series_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let is_csv = p
            .extension()
            .map(|e| e.eq_ignore_ascii_case("csv"))
            .unwrap_or(false);
        let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        if p.is_file() && is_csv && !stem.starts_with("labels") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn generic_csv_basic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "s1.csv", "value\n1.0\n2.0\n3.0\n");
        let s = load_series(&p, Format::GenericCsv).unwrap();
        assert_eq!(s.id, "s1");
        assert_eq!(s.values, vec![1.0, 2.0, 3.0]);
        assert!(s.timestamps.is_none());
    }

    #[test]
    fn generic_csv_missing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "a.csv", "timestamp,value\n1,1.0\n2,\n3,NaN\n4,4\n");
        let s = load_series(&p, Format::GenericCsv).unwrap();
        assert!(s.values[1].is_nan() && s.values[2].is_nan());
        assert_eq!(s.timestamps.as_deref(), Some(&[1, 2, 3, 4][..]));

        let p = write_tmp(dir.path(), "b.csv", "value\n1.0\nabc\n");
        match load_series(&p, Format::GenericCsv) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
        let p = write_tmp(dir.path(), "c.csv", "value\n");
        assert!(matches!(load_series(&p, Format::GenericCsv), Err(Error::InvalidInput(_))));
        let p = write_tmp(dir.path(), "d.csv", "timestamp,value\n5,1\n5,2\n");
        assert!(load_series(&p, Format::GenericCsv).is_err());
    }

    #[test]
    fn nab_layout_with_timestamp_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("artificialWithAnomaly");
        fs::create_dir(&cat).unwrap();
        let mut text = String::from("timestamp,value\n");
        for i in 0..4032 {
            let t = chrono::DateTime::from_timestamp(1_396_310_400 + 300 * i, 0).unwrap();
            text.push_str(&format!("{},{}\n", t.format("%Y-%m-%d %H:%M:%S"), i % 7));
        }
        let p = write_tmp(&cat, "art_daily_jumpsup.csv", &text);
        let s = load_series(&p, Format::Nab).unwrap();
        assert_eq!(s.len(), 4032);
        assert_eq!(s.id, "artificialWithAnomaly/art_daily_jumpsup.csv");

        let t = |i: i64| {
            chrono::DateTime::from_timestamp(1_396_310_400 + 300 * i, 0)
                .unwrap()
                .format("%Y-%m-%d %H:%M:%S.000000")
                .to_string()
        };
        let labels = format!(
            "{{\"artificialWithAnomaly/art_daily_jumpsup.csv\": [[\"{}\", \"{}\"]]}}",
            t(100),
            t(119)
        );
        let lp = write_tmp(dir.path(), "windows.json", &labels);
        let set = LabelSet::load(&lp, Format::Nab).unwrap();
        let s = set.attach(s).unwrap();
        assert_eq!(s.label_ranges.unwrap(), vec![Interval { start: 100, end: 120 }]);
    }

    #[test]
    fn nasa_labels_inclusive_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("value\n");
        for i in 0..200 {
            text.push_str(&format!("{}\n", (i as f64).sin()));
        }
        let p = write_tmp(dir.path(), "P-1.csv", &text);
        let lp = write_tmp(
            dir.path(),
            "labels.csv",
            "series_id,start_index,end_index\nP-1,100,119\nQ-2,5,6\n",
        );
        let set = LabelSet::load(&lp, Format::Nasa).unwrap();
        let s = load_labeled(&p, Format::Nasa, Some(&set)).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s.label_ranges.unwrap(), vec![Interval { start: 100, end: 120 }]);

        let headerless = write_tmp(dir.path(), "Q-2.csv", "1\n2\n3\n4\n5\n6\n7\n");
        assert_eq!(load_series(&headerless, Format::Nasa).unwrap().len(), 7);
    }

    #[test]
    fn impute_examples() {
        let nan = f64::NAN;
        let s = TimeSeries::new("x", vec![1.0, nan, 3.0]);
        assert_eq!(impute_missing(&s, ImputePolicy::Linear).unwrap().values, vec![1.0, 2.0, 3.0]);
        let s = TimeSeries::new("x", vec![nan, 5.0]);
        assert_eq!(impute_missing(&s, ImputePolicy::Ffill).unwrap().values, vec![5.0, 5.0]);
        let s = TimeSeries::new("x", vec![1.0, nan, nan, 4.0]);
        assert_eq!(
            impute_missing(&s, ImputePolicy::Linear).unwrap().values,
            vec![1.0, 2.0, 3.0, 4.0]
        );
        let s = TimeSeries::new("x", vec![1.0, nan, nan, 4.0]);
        assert_eq!(
            impute_missing(&s, ImputePolicy::Ffill).unwrap().values,
            vec![1.0, 1.0, 1.0, 4.0]
        );
        let s = TimeSeries::new("x", vec![nan, nan]);
        assert!(matches!(impute_missing(&s, ImputePolicy::Linear), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn standardize_examples() {
        let (s, p) = standardize(&TimeSeries::new("x", vec![0.0, 2.0]));
        assert_eq!(s.values, vec![-1.0, 1.0]);
        assert_eq!(p, StandardizationParams { mean: 1.0, std: 1.0 });
        let (s, p) = standardize(&TimeSeries::new("x", vec![5.0; 3]));
        assert_eq!(s.values, vec![0.0; 3]);
        assert_eq!(p, StandardizationParams { mean: 5.0, std: 1.0 });
    }

    proptest! {
        #[test]
        fn standardize_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..200)) {
            let (s, p) = standardize(&TimeSeries::new("x", values.clone()));
            let back = p.invert(&s.values);
            for (a, b) in values.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            if p.std != 1.0 || values.iter().any(|v| *v != values[0]) {
                let n = s.values.len() as f64;
                let m = s.values.iter().sum::<f64>() / n;
                prop_assert!(m.abs() < 1e-9);
            }
        }

        #[test]
        fn impute_is_idempotent(
            raw in proptest::collection::vec(proptest::option::weighted(0.7, -100f64..100.0), 1..60),
            ffill in any::<bool>(),
        ) {
            prop_assume!(raw.iter().any(|v| v.is_some()));
            let values: Vec<f64> = raw.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            let policy = if ffill { ImputePolicy::Ffill } else { ImputePolicy::Linear };
            let once = impute_missing(&TimeSeries::new("x", values.clone()), policy).unwrap();
            let twice = impute_missing(&once, policy).unwrap();
            prop_assert!(!once.has_missing());
            prop_assert_eq!(&once.values, &twice.values);
            for (i, v) in values.iter().enumerate() {
                if v.is_finite() {
                    prop_assert_eq!(once.values[i], *v);
                }
            }
        }
    }
}
