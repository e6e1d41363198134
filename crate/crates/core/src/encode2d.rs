//! Window-to-image encoding: Gramian Angular (summation) Field on channel 0,
//! recurrence plot on channel 1.
//!
//! Tensors are row-major `[N][N][C]` with `C = 2`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::windowing::Window;

pub const CHANNELS: usize = 2;

const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWindow {
    pub center: usize,
    pub size: usize,
    /// `[size][size][CHANNELS]`, row-major.
    pub tensor: Vec<f64>,
}

impl EncodedWindow {
    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.tensor[(i * self.size + j) * CHANNELS + c]
    }
}

/// Affine rescale into `[-1, 1]`; a constant window maps to zeros.
pub fn gaf_rescale(window: &[f64]) -> Vec<f64> {
    let (lo, hi) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; window.len()];
    }
    window
        .iter()
        .map(|&x| (((x - hi) + (x - lo)) / span).clamp(-1.0, 1.0))
        .collect()
}

/// `G[i][j] = x_i x_j - sqrt(1 - x_i^2) sqrt(1 - x_j^2)`, i.e. `cos(phi_i + phi_j)`.
pub fn gaf_encode(rescaled: &[f64]) -> Result<Vec<f64>> {
    let n = rescaled.len();
    if let Some(x) = rescaled.iter().find(|x| !(x.abs() <= 1.0 + RANGE_SLACK)) {
        return Err(Error::invalid(format!("GAF input {x} outside [-1, 1]")));
    }
    let sines: Vec<f64> = rescaled.iter().map(|x| (1.0 - x * x).max(0.0).sqrt()).collect();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = rescaled[i] * rescaled[j] - sines[i] * sines[j];
        }
    }
    Ok(g)
}

/// Side length of the recurrence plot for the given embedding.
pub fn rp_side(n: usize, m: usize, tau: usize) -> Result<usize> {
    if m == 0 || tau == 0 {
        return Err(Error::invalid("embedding dimension and delay must be positive"));
    }
    let span = (m - 1) * tau;
    if span >= n {
        return Err(Error::invalid(format!(
            "embedding (m={m}, tau={tau}) does not fit a window of {n}"
        )));
    }
    Ok(n - span)
}

/// Euclidean distances between delay-embedded trajectories.
pub fn rp_encode(window: &[f64], m: usize, tau: usize) -> Result<Vec<f64>> {
    let side = rp_side(window.len(), m, tau)?;
    let mut r = vec![0.0; side * side];
    for i in 0..side {
        for j in i + 1..side {
            let d = if m == 1 {
                (window[i] - window[j]).abs()
            } else {
                (0..m)
                    .map(|e| {
                        let diff = window[i + e * tau] - window[j + e * tau];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            r[i * side + j] = d;
            r[j * side + i] = d;
        }
    }
    Ok(r)
}

/// Encodes `values` into `out` (`[n][n][2]`) with the default embedding `m = tau = 1`.
pub fn encode_into<T: num_traits::Float>(values: &[f64], out: &mut [T]) -> Result<()> {
    let n = values.len();
    if out.len() != n * n * CHANNELS {
        return Err(Error::shape(n * n * CHANNELS, out.len()));
    }
    let g = gaf_encode(&gaf_rescale(values))?;
    let r = rp_encode(values, 1, 1)?;
    for (idx, cell) in out.chunks_exact_mut(CHANNELS).enumerate() {
        cell[0] = T::from(g[idx]).unwrap();
        cell[1] = T::from(r[idx]).unwrap();
    }
    Ok(())
}

pub fn encode_window(window: &Window) -> Result<EncodedWindow> {
    encode_window_with(window, 1, 1)
}

/// Like [`encode_window`] with an explicit embedding; non-default embeddings
/// that shrink the recurrence plot are rejected rather than padded.
pub fn encode_window_with(window: &Window, m: usize, tau: usize) -> Result<EncodedWindow> {
    let n = window.values.len();
    let side = rp_side(n, m, tau)?;
    if side != n {
        return Err(Error::Config(format!(
            "recurrence plot is {side}x{side} but GAF is {n}x{n}"
        )));
    }
    let g = gaf_encode(&gaf_rescale(&window.values))?;
    let r = rp_encode(&window.values, m, tau)?;
    let mut tensor = vec![0.0; n * n * CHANNELS];
    for idx in 0..n * n {
        tensor[idx * CHANNELS] = g[idx];
        tensor[idx * CHANNELS + 1] = r[idx];
    }
    Ok(EncodedWindow {
        center: window.center,
        size: n,
        tensor,
    })
}

const DUMP_MAGIC: &[u8; 4] = b"T2I1";

/// Serializes one tensor record: magic, `N` and `C` as u32 LE, then row-major f32 LE.
pub fn write_record<W: Write>(mut w: W, size: usize, channels: usize, data: &[f32]) -> std::io::Result<()> {
    assert_eq!(data.len(), size * size * channels);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(size as u32).to_le_bytes())?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Reads back every record in a dump produced by [`write_record`]/[`dump_windows`].
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<TensorRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<tensor dump>", e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    let u32_at = |b: &[u8], p: usize| u32::from_le_bytes([b[p], b[p + 1], b[p + 2], b[p + 3]]) as usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 12 || &bytes[pos..pos + 4] != DUMP_MAGIC {
            return Err(Error::invalid(format!("bad tensor record header at byte {pos}")));
        }
        let size = u32_at(&bytes, pos + 4);
        let channels = u32_at(&bytes, pos + 8);
        pos += 12;
        let count = size * size * channels;
        if bytes.len() - pos < count * 4 {
            return Err(Error::invalid("truncated tensor record"));
        }
        let data = bytes[pos..pos + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += count * 4;
        out.push(TensorRecord { size, channels, data });
    }
    Ok(out)
}

pub fn dump_windows(path: &Path, windows: &[EncodedWindow]) -> Result<()> {
    let mut buf = Vec::new();
    for w in windows {
        let data: Vec<f32> = w.tensor.iter().map(|&v| v as f32).collect();
        write_record(&mut buf, w.size, CHANNELS, &data).map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dump(path: &Path) -> Result<Vec<TensorRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(f))
}
