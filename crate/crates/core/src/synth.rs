//! Labelled synthetic series: a periodic base plus noise with injected anomalies.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_generic_csv, write_index_labels, TimeSeries};
use crate::interval::{normalize_ranges, Interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// `sin(2 pi t / period)`.
    Sine,
    /// Rising ramp from -1 to 1 every period.
    Sawtooth,
    /// Zero.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Short additive burst of `magnitude`.
    Spike,
    /// Sustained additive offset of `magnitude`.
    LevelShift,
    /// The signal is replaced by the flat level `-magnitude`.
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub position: usize,
    pub magnitude: f64,
    pub duration: usize,
}

impl InjectedAnomaly {
    pub fn interval(&self) -> Interval {
        Interval { start: self.position, end: self.position + self.duration }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub id: String,
    pub length: usize,
    pub base: BaseKind,
    pub period: f64,
    pub noise_std: f64,
    pub anomalies: Vec<InjectedAnomaly>,
    pub seed: u64,
}

fn base_value(kind: BaseKind, t: usize, period: f64) -> f64 {
    match kind {
        BaseKind::Sine => (2.0 * PI * t as f64 / period).sin(),
        BaseKind::Sawtooth => 2.0 * (t as f64 / period).fract() - 1.0,
        BaseKind::Constant => 0.0,
    }
}

/// The noiseless base signal of `spec`.
pub fn clean_base(spec: &SynthSpec) -> Vec<f64> {
    (0..spec.length).map(|t| base_value(spec.base, t, spec.period)).collect()
}

/// Builds the series; labels are exactly the injected intervals.
pub fn generate(spec: &SynthSpec) -> Result<TimeSeries> {
    if spec.length == 0 {
        return Err(Error::invalid("synthetic length must be positive"));
    }
    if !(spec.period > 0.0) && spec.base != BaseKind::Constant {
        return Err(Error::invalid(format!("period must be positive, got {}", spec.period)));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be nonnegative, got {}", spec.noise_std)));
    }
    for a in &spec.anomalies {
        if a.duration == 0 || !a.magnitude.is_finite() || a.magnitude == 0.0 {
            return Err(Error::invalid(format!("anomaly at {} needs positive duration and nonzero magnitude", a.position)));
        }
    }
    let labels = normalize_ranges(spec.anomalies.iter().map(|a| a.interval()).collect(), spec.length)?;

    let clean = clean_base(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut values: Vec<f64> = clean.iter().map(|b| b + noise.sample(&mut rng)).collect();
    for a in &spec.anomalies {
        let r = a.interval();
        for t in r.start..r.end {
            values[t] = match a.kind {
                AnomalyKind::Spike | AnomalyKind::LevelShift => values[t] + a.magnitude,
                AnomalyKind::Dropout => -a.magnitude,
            };
        }
        if (r.start..r.end).all(|t| values[t] == clean[t]) {
            return Err(Error::invalid(format!(
                "anomaly at {} leaves the base signal unchanged",
                a.position
            )));
        }
    }
    TimeSeries::new(spec.id.clone(), values).with_labels(labels)
}

/// Window size assumed when keeping injected anomalies clear of unscorable edges.
const EDGE: usize = 64;

/// The default acceptance corpus: ten sine series of length 2000, period 100,
/// noise 0.05, each with three spikes of 6-10x the noise level lasting 1-5 steps.
pub fn acceptance_corpus() -> Vec<SynthSpec> {
    (0..10u64).map(|i| spike_series(&format!("synth_{i:02}"), 2000, 100.0, 0.05, 3, 1000 + i)).collect()
}

/// A sine series with `count` randomly placed spikes, spaced well apart and
/// away from the edges.
pub fn spike_series(id: &str, length: usize, period: f64, noise_std: f64, count: usize, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
    let mut anomalies: Vec<InjectedAnomaly> = Vec::with_capacity(count);
    let span = length.saturating_sub(2 * EDGE);
    let min_gap = (span / (count.max(1) * 2)).max(8);
    let mut tries = 0;
    while anomalies.len() < count && tries < 10_000 {
        tries += 1;
        let duration = rng.random_range(1..=5);
        let position = EDGE + rng.random_range(0..span.saturating_sub(duration).max(1));
        if anomalies.iter().any(|a| a.position.abs_diff(position) < min_gap) {
            continue;
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let magnitude = sign * noise_std * rng.random_range(6.0..=10.0);
        anomalies.push(InjectedAnomaly { kind: AnomalyKind::Spike, position, magnitude, duration });
    }
    anomalies.sort_by_key(|a| a.position);
    SynthSpec { id: id.into(), length, base: BaseKind::Sine, period, noise_std, anomalies, seed }
}

/// Writes each series as `<id>.csv` plus one `labels.csv` with inclusive index ranges.
pub fn write_corpus(dir: &Path, series: &[TimeSeries]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(series.len());
    let mut rows = Vec::with_capacity(series.len());
    for s in series {
        let p = dir.join(format!("{}.csv", s.id));
        write_generic_csv(&p, s)?;
        paths.push(p);
        rows.push((s.id.clone(), s.label_ranges.clone().unwrap_or_default()));
    }
    write_index_labels(&dir.join("labels.csv"), &rows)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{list_series_files, load_labeled, Format, LabelSet};

    fn spec(base: BaseKind, noise: f64, anomalies: Vec<InjectedAnomaly>) -> SynthSpec {
        SynthSpec { id: "s".into(), length: 1000, base, period: 100.0, noise_std: noise, anomalies, seed: 7 }
    }

    #[test]
    fn spike_deviates_by_magnitude() {
        let a = InjectedAnomaly { kind: AnomalyKind::Spike, position: 500, magnitude: 8.0, duration: 1 };
        let s = spec(BaseKind::Sine, 0.0, vec![a]);
        let ts = generate(&s).unwrap();
        let clean = clean_base(&s);
        assert!((ts.values[500] - clean[500] - 8.0).abs() < 1e-12);
        assert_eq!(ts.values[499], clean[499]);
        assert_eq!(ts.label_ranges, Some(vec![Interval { start: 500, end: 501 }]));
    }

    #[test]
    fn deterministic_and_constant_base() {
        let s = acceptance_corpus()[3].clone();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let c = generate(&spec(BaseKind::Constant, 0.0, vec![])).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert_eq!(c.label_ranges, Some(vec![]));
    }

    #[test]
    fn overlapping_anomalies_rejected() {
        let a = InjectedAnomaly { kind: AnomalyKind::LevelShift, position: 100, magnitude: 1.0, duration: 50 };
        let b = InjectedAnomaly { position: 140, ..a };
        assert!(generate(&spec(BaseKind::Sine, 0.1, vec![a, b])).is_err());
        let out = InjectedAnomaly { position: 990, ..a };
        assert!(generate(&spec(BaseKind::Sine, 0.1, vec![out])).is_err());
    }

    #[test]
    fn labels_are_sound() {
        for s in acceptance_corpus() {
            let ts = generate(&s).unwrap();
            let noiseless = generate(&SynthSpec { noise_std: 0.0, ..s.clone() }).unwrap();
            let clean = clean_base(&s);
            let labels = ts.label_ranges.clone().unwrap();
            assert_eq!(labels.len(), 3);
            for r in &labels {
                assert!((r.start..r.end).any(|t| noiseless.values[t] != clean[t]));
                assert!(r.len() <= 5 && r.start >= EDGE && r.end <= s.length - EDGE);
                let mag = s.anomalies.iter().find(|a| a.position == r.start).unwrap().magnitude.abs();
                assert!((0.3..=0.5).contains(&mag));
            }
            for t in 0..s.length {
                if !labels.iter().any(|r| r.contains(t)) {
                    assert_eq!(noiseless.values[t], clean[t]);
                }
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let series: Vec<TimeSeries> = acceptance_corpus()[..2].iter().map(|s| generate(s).unwrap()).collect();
        write_corpus(dir.path(), &series).unwrap();
        let files = list_series_files(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let labels = LabelSet::load(&dir.path().join("labels.csv"), Format::GenericCsv).unwrap();
        for (f, s) in files.iter().zip(&series) {
            let back = load_labeled(f, Format::GenericCsv, Some(&labels)).unwrap();
            assert_eq!(back.id, s.id);
            assert_eq!(back.label_ranges, s.label_ranges);
            assert!(back.values.iter().zip(&s.values).all(|(a, b)| a == b));
        }
    }
}
