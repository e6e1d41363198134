use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open index interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!(
                "empty or reversed interval [{start}, {end})"
            )));
        }
        Ok(Interval { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn shifted(&self, by: usize) -> Interval {
        Interval {
            start: self.start + by,
            end: self.end + by,
        }
    }
}

/// Sorts `ranges` by start and checks they are nonempty, disjoint, and inside `[0, len)`.
pub fn normalize_ranges(mut ranges: Vec<Interval>, len: usize) -> Result<Vec<Interval>> {
    ranges.sort();
    for r in &ranges {
        if r.is_empty() {
            return Err(Error::invalid(format!(
                "empty label range [{}, {})",
                r.start, r.end
            )));
        }
        if r.end > len {
            return Err(Error::invalid(format!(
                "label range [{}, {}) exceeds series length {len}",
                r.start, r.end
            )));
        }
    }
    for pair in ranges.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(Error::invalid(format!(
                "overlapping label ranges [{}, {}) and [{}, {})",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_nonempty_intersection() {
        let a = Interval::new(10, 20).unwrap();
        assert!(a.overlaps(&Interval::new(19, 25).unwrap()));
        assert!(!a.overlaps(&Interval::new(20, 25).unwrap()));
        assert!(!a.overlaps(&Interval::new(0, 10).unwrap()));
        assert!(Interval::new(3, 3).is_err());
    }

    #[test]
    fn normalize_sorts_and_rejects_bad() {
        let r = normalize_ranges(
            vec![Interval { start: 5, end: 7 }, Interval { start: 0, end: 2 }],
            10,
        )
        .unwrap();
        assert_eq!(r[0].start, 0);
        assert!(normalize_ranges(vec![Interval { start: 5, end: 11 }], 10).is_err());
        assert!(normalize_ranges(
            vec![Interval { start: 0, end: 4 }, Interval { start: 3, end: 6 }],
            10
        )
        .is_err());
    }
}
