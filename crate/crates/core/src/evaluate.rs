//! Overlap F1 per series and count-weighted aggregation across sub-datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for OverlapCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn check(list: &[Interval], what: &str) -> Result<()> {
    match list.iter().find(|r| r.start >= r.end) {
        Some(r) => Err(Error::invalid(format!("malformed {what} interval [{}, {})", r.start, r.end))),
        None => Ok(()),
    }
}

/// Each predicted sequence is a true positive if it overlaps any truth
/// sequence and a false positive otherwise; each truth sequence overlapped by
/// no prediction is a false negative.
pub fn overlap_counts(predicted: &[Interval], truth: &[Interval]) -> Result<OverlapCounts> {
    check(predicted, "predicted")?;
    check(truth, "truth")?;
    let tp = predicted.iter().filter(|p| truth.iter().any(|t| p.overlaps(t))).count();
    let fn_ = truth.iter().filter(|t| !predicted.iter().any(|p| p.overlaps(t))).count();
    Ok(OverlapCounts { tp, fp: predicted.len() - tp, fn_ })
}

/// Harmonic mean of precision and recall; 0 whenever a denominator vanishes.
pub fn f1(c: OverlapCounts) -> f64 {
    if c.tp == 0 {
        return 0.0;
    }
    let p = c.tp as f64 / (c.tp + c.fp) as f64;
    let r = c.tp as f64 / (c.tp + c.fn_) as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMean {
    pub name: String,
    pub count: usize,
    pub mean_f1: f64,
}

/// Arithmetic mean per sub-dataset, then the series-count-weighted mean of those.
pub fn aggregate(per_subset: &BTreeMap<String, Vec<f64>>) -> Result<(Vec<SubsetMean>, f64)> {
    if per_subset.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut subsets = Vec::with_capacity(per_subset.len());
    for (name, f1s) in per_subset {
        if f1s.is_empty() {
            return Err(Error::invalid(format!("sub-dataset '{name}' has no series")));
        }
        let mean_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        subsets.push(SubsetMean { name: name.clone(), count: f1s.len(), mean_f1 });
    }
    let mean = weighted_mean(&subsets);
    Ok((subsets, mean))
}

/// `sum(count * mean) / sum(count)`.
pub fn weighted_mean(subsets: &[SubsetMean]) -> f64 {
    let n: usize = subsets.iter().map(|s| s.count).sum();
    subsets.iter().map(|s| s.count as f64 * s.mean_f1).sum::<f64>() / n as f64
}

/// Sub-dataset of a series id: the directory part (`realKnownCause/x.csv`), else `default`.
pub fn subset_of(series_id: &str) -> String {
    match series_id.rsplit_once('/') {
        Some((dir, _)) if !dir.is_empty() => dir.to_string(),
        _ => "default".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub series_id: String,
    pub subset: String,
    pub counts: OverlapCounts,
    pub f1: f64,
}

impl SeriesResult {
    pub fn new(series_id: &str, subset: &str, predicted: &[Interval], truth: &[Interval]) -> Result<Self> {
        let counts = overlap_counts(predicted, truth)?;
        Ok(SeriesResult { series_id: series_id.into(), subset: subset.into(), counts, f1: f1(counts) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub name: String,
    pub count: usize,
    pub mean_f1: f64,
    pub counts: OverlapCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub series: Vec<SeriesResult>,
    pub subsets: Vec<SubsetSummary>,
    pub mean_f1: f64,
    pub counts: OverlapCounts,
}

impl EvalReport {
    pub fn build(series: Vec<SeriesResult>) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<String, OverlapCounts> = BTreeMap::new();
        let mut total = OverlapCounts::default();
        for s in &series {
            groups.entry(s.subset.clone()).or_default().push(s.f1);
            *counts.entry(s.subset.clone()).or_default() += s.counts;
            total += s.counts;
        }
        let (means, mean_f1) = aggregate(&groups)?;
        let subsets = means
            .into_iter()
            .map(|m| SubsetSummary { counts: counts[&m.name], name: m.name, count: m.count, mean_f1: m.mean_f1 })
            .collect();
        Ok(EvalReport { series, subsets, mean_f1, counts: total })
    }

    /// One row per model: sub-dataset means, then the weighted mean.
    pub fn table_csv(&self, model: &str) -> String {
        let mut s = String::from("model");
        for sub in &self.subsets {
            let _ = write!(s, ",{}", sub.name);
        }
        s.push_str(",mean\n");
        s.push_str(model);
        for sub in &self.subsets {
            let _ = write!(s, ",{:.3}", sub.mean_f1);
        }
        let _ = writeln!(s, ",{:.3}", self.mean_f1);
        s
    }

    pub fn series_csv(&self) -> String {
        let mut s = String::from("series_id,subset,tp,fp,fn,f1\n");
        for r in &self.series {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.series_id, r.subset, r.counts.tp, r.counts.fp, r.counts.fn_, r.f1);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `eval.json`, `eval_table.csv` and `eval_series.csv` into `dir`.
    pub fn write_all(&self, dir: &Path, model: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("eval.json", self.to_json()),
            ("eval_table.csv", self.table_csv(model)),
            ("eval_series.csv", self.series_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(s: usize, e: usize) -> Interval {
        Interval { start: s, end: e }
    }

    #[test]
    fn counting_examples() {
        let c = overlap_counts(&[iv(10, 20)], &[iv(15, 30)]).unwrap();
        assert_eq!(c, OverlapCounts { tp: 1, fp: 0, fn_: 0 });
        let c = overlap_counts(&[iv(10, 20), iv(40, 50)], &[iv(15, 30)]).unwrap();
        assert_eq!(c, OverlapCounts { tp: 1, fp: 1, fn_: 0 });
        let c = overlap_counts(&[], &[iv(0, 5)]).unwrap();
        assert_eq!(c, OverlapCounts { tp: 0, fp: 0, fn_: 1 });
        // touching half-open intervals do not overlap
        let c = overlap_counts(&[iv(0, 5)], &[iv(5, 6)]).unwrap();
        assert_eq!(c, OverlapCounts { tp: 0, fp: 1, fn_: 1 });
        // two predictions on one truth are two true positives
        let c = overlap_counts(&[iv(0, 2), iv(3, 4)], &[iv(0, 10)]).unwrap();
        assert_eq!(c, OverlapCounts { tp: 2, fp: 0, fn_: 0 });
        assert!(overlap_counts(&[iv(4, 4)], &[]).is_err());
        assert!(overlap_counts(&[], &[iv(5, 2)]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(OverlapCounts { tp: 1, fp: 0, fn_: 0 }), 1.0);
        assert!((f1(OverlapCounts { tp: 1, fp: 1, fn_: 0 }) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(OverlapCounts { tp: 0, fp: 3, fn_: 2 }), 0.0);
        assert_eq!(f1(OverlapCounts::default()), 0.0);
    }

    #[test]
    fn aggregation_examples() {
        let m = BTreeMap::from([("MSL".to_string(), vec![0.595; 27]), ("SMAP".to_string(), vec![0.679; 53])]);
        let (subs, mean) = aggregate(&m).unwrap();
        assert_eq!(subs.len(), 2);
        assert!((mean - (27.0 * 0.595 + 53.0 * 0.679) / 80.0).abs() < 1e-12);
        let single = BTreeMap::from([("a".to_string(), vec![0.2, 0.4])]);
        assert!((aggregate(&single).unwrap().1 - 0.3).abs() < 1e-15);
        let empty = BTreeMap::from([("a".to_string(), vec![])]);
        assert!(aggregate(&empty).is_err());
        assert_eq!(subset_of("realKnownCause/ec2.csv"), "realKnownCause");
        assert_eq!(subset_of("A-1"), "default");
    }

    #[test]
    fn report_tables() {
        let series = vec![
            SeriesResult::new("a/1", "a", &[iv(0, 2)], &[iv(1, 3)]).unwrap(),
            SeriesResult::new("a/2", "a", &[], &[iv(1, 3)]).unwrap(),
            SeriesResult::new("b/1", "b", &[iv(0, 2)], &[iv(0, 2)]).unwrap(),
        ];
        let r = EvalReport::build(series).unwrap();
        assert_eq!(r.subsets[0].mean_f1, 0.5);
        assert!((r.mean_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.counts, OverlapCounts { tp: 2, fp: 0, fn_: 1 });
        assert_eq!(r.table_csv("ours"), "model,a,b,mean\nours,0.500,1.000,0.667\n");
        assert!(r.series_csv().starts_with("series_id,subset,tp,fp,fn,f1\na/1,a,1,0,0,1\n"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn brute(pred: &[Interval], truth: &[Interval]) -> OverlapCounts {
        let hit = |a: &Interval, b: &Interval| (a.start..a.end).any(|i| b.contains(i));
        let mut c = OverlapCounts::default();
        for p in pred {
            if truth.iter().any(|t| hit(p, t)) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        c.fn_ = truth.iter().filter(|t| !pred.iter().any(|p| hit(p, t))).count();
        c
    }

    fn intervals() -> impl Strategy<Value = Vec<Interval>> {
        prop::collection::vec((0usize..20, 1usize..6), 0..=5)
            .prop_map(|v| v.into_iter().map(|(s, l)| iv(s, (s + l).min(21))).collect())
    }

    proptest! {
        #[test]
        fn matches_brute_force(p in intervals(), t in intervals()) {
            prop_assert_eq!(overlap_counts(&p, &t).unwrap(), brute(&p, &t));
        }

        #[test]
        fn shift_invariant(p in intervals(), t in intervals(), k in 0usize..1000) {
            let sp: Vec<_> = p.iter().map(|r| r.shifted(k)).collect();
            let st: Vec<_> = t.iter().map(|r| r.shifted(k)).collect();
            prop_assert_eq!(overlap_counts(&p, &t).unwrap(), overlap_counts(&sp, &st).unwrap());
        }

        #[test]
        fn f1_monotone_in_tp(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let a = f1(OverlapCounts { tp, fp, fn_ });
            let b = f1(OverlapCounts { tp: tp + 1, fp, fn_ });
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
