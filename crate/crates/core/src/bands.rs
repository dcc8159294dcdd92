//! Grouping of RoPE pairs into contiguous log-frequency bands.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::rope::Pairing;

/// `B` contiguous, disjoint, ascending pair-index ranges covering `0..P`.
/// Band 0 holds the highest frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPartition {
    ranges: Vec<Range<usize>>,
    freqs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandFreqStats {
    pub median: f64,
    pub global_min: f64,
    /// `median / global_min`, always `>= 1`.
    pub ratio: f64,
}

fn check_geometric(freqs: &[f64]) -> Result<()> {
    if freqs.is_empty() {
        return Err(Error::EmptyInput("band frequencies"));
    }
    if freqs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config("frequencies must be positive and finite"));
    }
    if freqs.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("frequencies must be strictly decreasing"));
    }
    Ok(())
}

/// Splits `P` pairs into `num_bands` bands with `[⌊bP/B⌋, ⌊(b+1)P/B⌋)`.
/// For geometric frequencies equal index counts are equal log-width.
pub fn partition_log_freq(freqs: &[f64], num_bands: usize) -> Result<BandPartition> {
    check_geometric(freqs)?;
    let p = freqs.len();
    if num_bands == 0 || num_bands > p {
        return Err(Error::config(format!(
            "band count must be in [1, {p}], got {num_bands}"
        )));
    }
    let ranges = (0..num_bands)
        .map(|b| (b * p / num_bands)..((b + 1) * p / num_bands))
        .collect();
    Ok(BandPartition {
        ranges,
        freqs: freqs.to_vec(),
    })
}

impl BandPartition {
    /// Rebuilds a partition from explicit ranges, checking the cover.
    pub fn from_ranges(ranges: Vec<Range<usize>>, freqs: Vec<f64>) -> Result<Self> {
        check_geometric(&freqs)?;
        let mut next = 0;
        for (b, r) in ranges.iter().enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(Error::Schema(format!(
                    "band {b} range {r:?} breaks the contiguous cover at {next}"
                )));
            }
            next = r.end;
        }
        if next != freqs.len() || ranges.is_empty() {
            return Err(Error::Schema(format!(
                "bands cover 0..{next} but there are {} pairs",
                freqs.len()
            )));
        }
        Ok(Self { ranges, freqs })
    }

    pub fn num_bands(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.freqs.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn range(&self, band: usize) -> Result<Range<usize>> {
        self.ranges
            .get(band)
            .cloned()
            .ok_or(Error::IndexOutOfRange {
                what: "band",
                index: band,
                len: self.ranges.len(),
            })
    }

    pub fn band_of_pair(&self, pair: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&pair))
    }

    pub fn band_freq_stats(&self, band: usize) -> Result<BandFreqStats> {
        let r = self.range(band)?;
        let members = &self.freqs[r];
        let n = members.len();
        // Members are strictly decreasing, so the middle is positional.
        let median = if n % 2 == 1 {
            members[n / 2]
        } else {
            (members[n / 2 - 1] * members[n / 2]).sqrt()
        };
        let global_min = self.freqs.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(BandFreqStats {
            median,
            global_min,
            ratio: (median / global_min).max(1.0),
        })
    }

    /// Projection rows touched by `band` for a weight with `total_rows`
    /// output rows stacked as `total_rows / head_dim` heads.
    pub fn band_rows(
        &self,
        band: usize,
        pairing: Pairing,
        head_dim: usize,
        total_rows: usize,
    ) -> Result<Vec<usize>> {
        let r = self.range(band)?;
        let heads = check_layout(self.num_pairs(), head_dim, total_rows)?;
        let mut rows = Vec::with_capacity(2 * r.len() * heads);
        for h in 0..heads {
            for i in r.clone() {
                let (a, b) = pairing.pair_indices(head_dim, i);
                rows.push(h * head_dim + a);
                rows.push(h * head_dim + b);
            }
        }
        rows.sort_unstable();
        Ok(rows)
    }

    /// Band index for every projection row.
    pub fn row_bands(
        &self,
        pairing: Pairing,
        head_dim: usize,
        total_rows: usize,
    ) -> Result<Vec<usize>> {
        check_layout(self.num_pairs(), head_dim, total_rows)?;
        let mut out = vec![usize::MAX; total_rows];
        for b in 0..self.num_bands() {
            for row in self.band_rows(b, pairing, head_dim, total_rows)? {
                out[row] = b;
            }
        }
        Ok(out)
    }
}

/// Validates a stacked-head layout and returns the head count.
pub(crate) fn check_layout(num_pairs: usize, head_dim: usize, total_rows: usize) -> Result<usize> {
    if head_dim != 2 * num_pairs {
        return Err(Error::DimensionMismatch {
            what: "head_dim vs 2 * rope pairs".into(),
            expected: 2 * num_pairs,
            got: head_dim,
        });
    }
    if total_rows == 0 || total_rows % head_dim != 0 {
        return Err(Error::config(format!(
            "projection with {total_rows} rows is not a whole number of {head_dim}-dim heads"
        )));
    }
    Ok(total_rows / head_dim)
}
