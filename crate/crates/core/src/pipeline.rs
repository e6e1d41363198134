//! Preprocessing shared by training and detection: impute, standardize, window, encode.

use crate::encode2d::{encode_into, CHANNELS};
use crate::error::{Error, Result};
use crate::ingest::{fit_standardization, impute_missing, ImputePolicy, StandardizationParams, TimeSeries};
use crate::par::{self, Parallelism};
use crate::windowing::{centers, window_start};

/// Encoded windows stored contiguously as `[count][n][n][2]` in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub size: usize,
    pub centers: Vec<usize>,
    pub data: Vec<f32>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.size * self.size * CHANNELS
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Imputes gaps (linearly) and z-scores the values. With `params` given, they
/// are reused instead of being fitted, as at detection time.
pub fn prepare_values(series: &TimeSeries, params: Option<StandardizationParams>) -> Result<(Vec<f64>, StandardizationParams)> {
    let values = if series.has_missing() {
        impute_missing(series, ImputePolicy::Linear)?.values
    } else {
        series.values.clone()
    };
    let params = params.unwrap_or_else(|| fit_standardization(&values));
    Ok((params.apply(&values), params))
}

/// Encodes every window with centre step `step`; windows are encoded in parallel, stored in order.
pub fn encode_windows(values: &[f64], n: usize, step: usize, mode: Parallelism) -> Result<WindowSet> {
    let ks = centers(values.len(), n, step)?;
    if ks.is_empty() {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than one window of {n}",
            values.len()
        )));
    }
    let len = n * n * CHANNELS;
    let mut data = vec![0f32; ks.len() * len];
    par::fill_chunks(mode, &mut data, len, |i, out| {
        let start = window_start(ks[i], n);
        // failures are marked with NaN and reported below
        if encode_into(&values[start..start + n], out).is_err() {
            out.fill(f32::NAN);
        }
    });
    if let Some(i) = (0..ks.len()).find(|&i| data[i * len].is_nan()) {
        return Err(Error::invalid(format!(
            "window centred at {} contains non-finite values",
            ks[i]
        )));
    }
    Ok(WindowSet { size: n, centers: ks, data })
}
