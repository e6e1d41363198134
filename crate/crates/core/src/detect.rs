//! Scoring, thresholding, grouping and pruning of anomalous steps.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode2d::{encode_into, CHANNELS};
use crate::error::{Error, Result};
use crate::hvae::checkpoint::CheckpointModel;
use crate::hvae::ModelParams;
use crate::ingest::{StandardizationParams, TimeSeries};
use crate::par::{self, Parallelism};
use crate::pipeline::prepare_values;
use crate::windowing::{scorable_range, window_start};

/// Anything that maps an encoded window `[n][n][2]` to its reconstruction.
pub trait Reconstructor: Sync {
    fn window(&self) -> usize;

    /// `seed` of `None` reconstructs through posterior means; otherwise latent
    /// noise is drawn from a generator seeded with it.
    fn reconstruct(&self, x: &[f32], seed: Option<u64>) -> Result<Vec<f32>>;
}

impl Reconstructor for ModelParams<f32> {
    fn window(&self) -> usize {
        self.arch.window
    }

    fn reconstruct(&self, x: &[f32], seed: Option<u64>) -> Result<Vec<f32>> {
        match seed {
            None => self.reconstruct_sample(x, None),
            Some(s) => {
                let noise = self.draw_noise(&mut ChaCha8Rng::seed_from_u64(s));
                self.reconstruct_sample(x, Some(&noise))
            }
        }
    }
}

/// Reconstructs its input exactly.
#[derive(Debug, Clone, Copy)]
pub struct IdentityStub {
    pub window: usize,
}

impl Reconstructor for IdentityStub {
    fn window(&self) -> usize {
        self.window
    }

    fn reconstruct(&self, x: &[f32], _: Option<u64>) -> Result<Vec<f32>> {
        Ok(x.to_vec())
    }
}

/// Reconstructs all zeros.
#[derive(Debug, Clone, Copy)]
pub struct ZeroStub {
    pub window: usize,
}

impl Reconstructor for ZeroStub {
    fn window(&self) -> usize {
        self.window
    }

    fn reconstruct(&self, x: &[f32], _: Option<u64>) -> Result<Vec<f32>> {
        Ok(vec![0.0; x.len()])
    }
}

impl Reconstructor for CheckpointModel {
    fn window(&self) -> usize {
        CheckpointModel::window(self)
    }

    fn reconstruct(&self, x: &[f32], seed: Option<u64>) -> Result<Vec<f32>> {
        match self {
            CheckpointModel::Hvae(m) => Reconstructor::reconstruct(m, x, seed),
            CheckpointModel::IdentityStub { window } => IdentityStub { window: *window }.reconstruct(x, seed),
            CheckpointModel::ZeroStub { window } => ZeroStub { window: *window }.reconstruct(x, seed),
        }
    }
}

/// Scores of the scorable steps `offset..offset + scores.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub offset: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ScoreSeries {
    pub fn new(offset: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no scores"));
        }
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("scores must be finite and nonnegative, got {s}")));
        }
        let (mean, std) = mean_std(&scores);
        Ok(ScoreSeries { offset, scores, mean, std })
    }

    /// Steps covered, as `[offset, offset + len)`.
    pub fn end(&self) -> usize {
        self.offset + self.scores.len()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean + 2 * std`; a step is anomalous when its score is strictly greater.
pub fn threshold(s: &ScoreSeries) -> f64 {
    s.mean + 2.0 * s.std
}

pub fn flags(s: &ScoreSeries, threshold: f64) -> Vec<bool> {
    s.scores.iter().map(|&v| v > threshold).collect()
}

/// Half-open run of flagged steps with its peak score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySequence {
    pub start: usize,
    pub end: usize,
    pub max_score: f64,
}

/// Maximal runs of true flags; `flags[i]` and `scores[i]` describe step `offset + i`.
pub fn group_sequences(flags: &[bool], scores: &[f64], offset: usize) -> Vec<AnomalySequence> {
    assert_eq!(flags.len(), scores.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let start = i;
        let mut max = scores[i];
        while i < flags.len() && flags[i] {
            max = max.max(scores[i]);
            i += 1;
        }
        out.push(AnomalySequence { start: offset + start, end: offset + i, max_score: max });
    }
    out
}

/// Descent-rate pruning. Sequences are ranked by peak score (descending,
/// earlier start first on ties); the first rank `i >= 2` whose drop from the
/// previous peak is below `theta`, whose peak is below `4 * std` and below
/// `lambda` times the top peak is removed together with every lower rank.
pub fn prune(sequences: &[AnomalySequence], std: f64, theta: f64, lambda: f64) -> Vec<AnomalySequence> {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&sequences[a], &sequences[b]);
        y.max_score
            .partial_cmp(&x.max_score)
            .unwrap_or(Ordering::Equal)
            .then(x.start.cmp(&y.start))
    });
    let m = |r: usize| sequences[order[r]].max_score;
    let cut = (1..order.len()).find(|&r| {
        let (prev, cur) = (m(r - 1), m(r));
        cur > 0.0 && (prev - cur) / cur < theta && cur < 4.0 * std && cur < lambda * m(0)
    });
    match cut {
        None => sequences.to_vec(),
        Some(r) => {
            let mut keep = vec![false; sequences.len()];
            for &i in &order[..r] {
                keep[i] = true;
            }
            sequences.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| *s).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub theta: f64,
    pub lambda: f64,
    /// Score through sampled rather than mean posteriors, seeded per window.
    pub sampling_seed: Option<u64>,
    pub parallelism: Parallelism,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { theta: 0.1, lambda: 0.95, sampling_seed: None, parallelism: Parallelism::default() }
    }
}

/// A reported sequence with optional timestamps of its first and last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedSequence {
    pub start: usize,
    pub end: usize,
    pub max_score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub start_timestamp: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub end_timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub series_id: String,
    pub length: usize,
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
    /// Pruned sequences.
    pub sequences: Vec<ReportedSequence>,
    pub sequences_raw: Vec<AnomalySequence>,
    pub score_offset: usize,
    pub scores: Vec<f64>,
}

impl DetectionReport {
    /// Per-step predictions over the whole series; unscored edges are false.
    pub fn predictions(&self) -> Vec<bool> {
        let mut p = vec![false; self.length];
        for s in &self.sequences {
            p[s.start..s.end].fill(true);
        }
        p
    }

    pub fn pruned(&self) -> Vec<AnomalySequence> {
        self.sequences
            .iter()
            .map(|s| AnomalySequence { start: s.start, end: s.end, max_score: s.max_score })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), line: e.line(), msg: e.to_string() })
    }
}

/// Thresholds, groups and prunes precomputed scores of a series of `length` steps.
pub fn detect_scores(
    series_id: &str,
    length: usize,
    scores: &ScoreSeries,
    timestamps: Option<&[i64]>,
    theta: f64,
    lambda: f64,
) -> Result<DetectionReport> {
    if scores.end() > length {
        return Err(Error::OutOfRange { index: scores.end(), msg: format!("scores exceed series length {length}") });
    }
    let thr = threshold(scores);
    let raw = group_sequences(&flags(scores, thr), &scores.scores, scores.offset);
    let pruned = prune(&raw, scores.std, theta, lambda);
    let ts = |i: usize| timestamps.and_then(|t| t.get(i).copied());
    let sequences = pruned
        .iter()
        .map(|s| ReportedSequence {
            start: s.start,
            end: s.end,
            max_score: s.max_score,
            start_timestamp: ts(s.start),
            end_timestamp: ts(s.end - 1),
        })
        .collect();
    Ok(DetectionReport {
        series_id: series_id.to_string(),
        length,
        threshold: thr,
        mean: scores.mean,
        std: scores.std,
        sequences,
        sequences_raw: raw,
        score_offset: scores.offset,
        scores: scores.scores.clone(),
    })
}

/// Reconstruction error of every scorable step of the standardized series.
pub fn score_values<R: Reconstructor + ?Sized>(
    model: &R,
    values: &[f64],
    sampling_seed: Option<u64>,
    mode: Parallelism,
) -> Result<ScoreSeries> {
    let n = model.window();
    let range = scorable_range(values.len(), n)?
        .ok_or_else(|| Error::invalid(format!("series of length {} is shorter than window {n}", values.len())))?;
    let first = *range.start();
    let count = range.end() - first + 1;
    let scores: Vec<Result<f64>> = par::map_range(mode, count, |i| {
        let k = first + i;
        let start = window_start(k, n);
        let mut x = vec![0f32; n * n * CHANNELS];
        encode_into(&values[start..start + n], &mut x)?;
        let seed = sampling_seed.map(|s| s ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x_hat = model.reconstruct(&x, seed)?;
        if x_hat.len() != x.len() {
            return Err(Error::shape(x.len(), x_hat.len()));
        }
        Ok(0.5 * x.iter().zip(&x_hat).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>())
    });
    ScoreSeries::new(first, scores.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Scores `series` (standardized with the training parameters) and runs detection.
pub fn detect<R: Reconstructor + ?Sized>(
    model: &R,
    series: &TimeSeries,
    standardization: StandardizationParams,
    cfg: &DetectConfig,
) -> Result<DetectionReport> {
    let (values, _) = prepare_values(series, Some(standardization))?;
    let scores = score_values(model, &values, cfg.sampling_seed, cfg.parallelism)?;
    detect_scores(&series.id, series.len(), &scores, series.timestamps.as_deref(), cfg.theta, cfg.lambda)
}
