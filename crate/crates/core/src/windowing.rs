//! Fixed-length windows centred on scorable steps.
//!
//! Indices are 0-based. A window of even length `N = 2w` centred on step `k`
//! covers `values[k - w + 1 ..= k + w]`, so the scorable centres are
//! `w - 1 ..= L - w - 1`: exactly `L - N + 1` of them. The first `w - 1` and
//! last `w` steps are never scored.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub center: usize,
    pub values: Vec<f64>,
}

fn half(n: usize) -> Result<usize> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!(
            "window size must be even and positive, got {n}"
        )));
    }
    Ok(n / 2)
}

/// Admissible centres for a series of length `len`, or `None` if no full window fits.
pub fn scorable_range(len: usize, n: usize) -> Result<Option<RangeInclusive<usize>>> {
    let w = half(n)?;
    if len < n {
        return Ok(None);
    }
    Ok(Some(w - 1..=len - w - 1))
}

/// First series index covered by the window centred on `k`.
pub fn window_start(k: usize, n: usize) -> usize {
    k + 1 - n / 2
}

pub fn extract_window(values: &[f64], k: usize, n: usize) -> Result<Window> {
    let range = scorable_range(values.len(), n)?;
    match range {
        Some(r) if r.contains(&k) => {
            let start = window_start(k, n);
            Ok(Window {
                center: k,
                values: values[start..start + n].to_vec(),
            })
        }
        Some(r) => Err(Error::OutOfRange {
            index: k,
            msg: format!(
                "window of size {n} needs a centre in [{}, {}]",
                r.start(),
                r.end()
            ),
        }),
        None => Err(Error::OutOfRange {
            index: k,
            msg: format!("series of length {} is shorter than window {n}", values.len()),
        }),
    }
}

/// Iterator over windows in increasing centre order.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    values: &'a [f64],
    n: usize,
    step: usize,
    next: usize,
    last: usize,
}

impl<'a> Iterator for Windows<'a> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.next > self.last {
            return None;
        }
        let k = self.next;
        self.next += self.step;
        let start = window_start(k, self.n);
        Some(Window {
            center: k,
            values: self.values[start..start + self.n].to_vec(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = if self.next > self.last {
            0
        } else {
            (self.last - self.next) / self.step + 1
        };
        (left, Some(left))
    }
}

impl ExactSizeIterator for Windows<'_> {}

pub fn iter_windows(values: &[f64], n: usize, step: usize) -> Result<Windows<'_>> {
    if step == 0 {
        return Err(Error::invalid("window step must be positive"));
    }
    let range = scorable_range(values.len(), n)?.ok_or_else(|| {
        Error::invalid(format!(
            "series of length {} is shorter than window {n}",
            values.len()
        ))
    })?;
    Ok(Windows {
        values,
        n,
        step,
        next: *range.start(),
        last: *range.end(),
    })
}

/// Centres visited by [`iter_windows`] with the given step.
pub fn centers(len: usize, n: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::invalid("window step must be positive"));
    }
    Ok(scorable_range(len, n)?
        .map(|r| r.step_by(step).collect())
        .unwrap_or_default())
}
