//! Interpolation Pressure and Tail-Inflation Ratios, aggregated per band.
//!
//! IP measures how sharply a pair's phase deviation at displacement `D` reacts
//! to its interpolation scale. TIR compares high-quantile magnitudes between
//! a short-context cache and a position-interpolated long-context cache:
//! `TIR^W` on pre-activations `|w_i . h|`, `TIR^A` on the infinity norm of a
//! rotated RoPE pair (scaled phase over unscaled phase).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bands::{check_layout, BandPartition};
use crate::error::{ensure_finite, Error, Result};
use crate::evaluator::ModelBundle;
use crate::linalg::{dot, Matrix};
use crate::par;
use crate::rope::{pair_frequencies, rotate_pair, Pairing, Rope, RopeConfig, ScalingScheme};

pub const DEFAULT_EPS: f64 = 0.01;
pub const DEFAULT_SAMPLE_FLOOR: usize = 1000;
pub const REPORT_VERSION: u32 = 1;

/// Pre-rotation head vectors (one row per sample) with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSamples {
    pub vectors: Matrix,
    pub positions: Vec<u64>,
}

impl PairSamples {
    pub fn new(vectors: Matrix, positions: Vec<u64>) -> Result<Self> {
        if vectors.rows() != positions.len() {
            return Err(Error::DimensionMismatch {
                what: "pair samples vs positions".into(),
                expected: vectors.rows(),
                got: positions.len(),
            });
        }
        Ok(Self { vectors, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub short_length: usize,
    pub long_length: usize,
    pub scheme_id: String,
}

/// Short-context vs interpolated long-context samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub short_hidden: Matrix,
    pub long_hidden: Matrix,
    pub short_pairs: PairSamples,
    /// Used by [`tir_activation`]; positions may exceed the training window.
    pub long_pairs: PairSamples,
    pub meta: CacheMeta,
}

impl ActivationCache {
    pub fn new(
        short_hidden: Matrix,
        long_hidden: Matrix,
        short_pairs: PairSamples,
        long_pairs: PairSamples,
        meta: CacheMeta,
    ) -> Result<Self> {
        if short_hidden.cols() != long_hidden.cols() {
            return Err(Error::DimensionMismatch {
                what: "short vs long hidden width".into(),
                expected: short_hidden.cols(),
                got: long_hidden.cols(),
            });
        }
        if short_pairs.vectors.cols() != long_pairs.vectors.cols() {
            return Err(Error::DimensionMismatch {
                what: "short vs long pair width".into(),
                expected: short_pairs.vectors.cols(),
                got: long_pairs.vectors.cols(),
            });
        }
        ensure_finite(short_hidden.as_slice(), "short hidden cache")?;
        ensure_finite(long_hidden.as_slice(), "long hidden cache")?;
        ensure_finite(short_pairs.vectors.as_slice(), "short pair cache")?;
        ensure_finite(long_pairs.vectors.as_slice(), "long pair cache")?;
        Ok(Self {
            short_hidden,
            long_hidden,
            short_pairs,
            long_pairs,
            meta,
        })
    }

    /// Quantiles at `1 - eps` need enough samples to be stable.
    pub fn check_sample_floor(&self, floor: usize) -> Result<()> {
        let counts = [
            ("short hidden", self.short_hidden.rows()),
            ("long hidden", self.long_hidden.rows()),
            ("short pairs", self.short_pairs.len()),
            ("long pairs", self.long_pairs.len()),
        ];
        for (what, n) in counts {
            if n < floor {
                return Err(Error::config(format!(
                    "{what} cache has {n} samples, fewer than the floor of {floor}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_positions(&self, train_window: usize) -> Result<()> {
        if let Some(&m) = self
            .short_pairs
            .positions
            .iter()
            .find(|&&m| m > train_window as u64)
        {
            return Err(Error::config(format!(
                "short-context sample at position {m} exceeds the training window {train_window}"
            )));
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("quantile eps must be in (0, 1), got {eps}")))
    }
}

#[inline]
pub fn pressure(omega: f64, warped_displacement: f64, scale: f64) -> f64 {
    omega * warped_displacement / (scale * scale)
}

/// `IP_i = ω_i f(D) / s_i²` for every pair.
pub fn interpolation_pressure(
    config: &RopeConfig,
    scheme: &ScalingScheme,
    displacement: u64,
) -> Result<Vec<f64>> {
    if displacement == 0 {
        return Err(Error::config("interpolation pressure needs displacement D > 0"));
    }
    scheme.validate_for(config)?;
    let fd = scheme.warp.apply(displacement as f64);
    Ok(pair_frequencies(config)
        .into_iter()
        .zip(&scheme.scales)
        .map(|(omega, &s)| pressure(omega, fd, s))
        .collect())
}

/// Linear-interpolated order statistic (closest-ranks, `h = (n-1)·level`).
pub fn quantile(samples: &[f64], level: f64) -> Result<f64> {
    let mut buf = samples.to_vec();
    quantile_in_place(&mut buf, level)
}

/// Same as [`quantile`] but reorders `samples` instead of copying.
pub fn quantile_in_place(samples: &mut [f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("quantile samples"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::config(format!("quantile level must be in [0, 1], got {level}")));
    }
    ensure_finite(samples, "quantile samples")?;
    let n = samples.len();
    let h = (n - 1) as f64 * level;
    let lo = (h.floor() as usize).min(n - 1);
    let frac = h - lo as f64;
    let (_, a, upper) = samples.select_nth_unstable_by(lo, f64::total_cmp);
    let a = *a;
    if frac == 0.0 || upper.is_empty() {
        return Ok(a);
    }
    let b = upper
        .iter()
        .copied()
        .min_by(f64::total_cmp)
        .unwrap_or(a);
    Ok(a + frac * (b - a))
}

/// Per-row `Q_long(1-ε) / Q_short(1-ε)` of `|w_i . h|`.
pub fn tir_weight(weight_rows: &Matrix, cache: &ActivationCache, eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let width = cache.short_hidden.cols();
    if weight_rows.cols() != width {
        return Err(Error::DimensionMismatch {
            what: "weight row width vs hidden width".into(),
            expected: width,
            got: weight_rows.cols(),
        });
    }
    if cache.short_hidden.rows() == 0 || cache.long_hidden.rows() == 0 {
        return Err(Error::EmptyInput("hidden-state cache"));
    }
    ensure_finite(weight_rows.as_slice(), "weight rows")?;
    let level = 1.0 - eps;
    par::try_map_range(weight_rows.rows(), |r| {
        let w = weight_rows.row(r);
        let mut short: Vec<f64> = cache.short_hidden.row_iter().map(|h| dot(w, h).abs()).collect();
        let mut long: Vec<f64> = cache.long_hidden.row_iter().map(|h| dot(w, h).abs()).collect();
        let qs = quantile_in_place(&mut short, level)?;
        let ql = quantile_in_place(&mut long, level)?;
        if qs == 0.0 {
            return Err(Error::ZeroShortQuantile { row: r, level });
        }
        Ok(ql / qs)
    })
}

fn pair_inf_norms(
    samples: &PairSamples,
    rope: &Rope,
    pair: usize,
    range: impl Iterator<Item = usize>,
) -> Vec<f64> {
    range
        .map(|j| {
            let u = rope.pair(samples.vectors.row(j), pair);
            rotate_pair(u, rope.phase(samples.positions[j], pair)).inf_norm()
        })
        .collect()
}

fn tir_a_ratio(
    samples: &PairSamples,
    scaled: &Rope,
    plain: &Rope,
    pair: usize,
    idx: &[usize],
    level: f64,
) -> Result<f64> {
    let mut num = pair_inf_norms(samples, scaled, pair, idx.iter().copied());
    let mut den = pair_inf_norms(samples, plain, pair, idx.iter().copied());
    let qn = quantile_in_place(&mut num, level)?;
    let qd = quantile_in_place(&mut den, level)?;
    if qd == 0.0 {
        return Err(Error::ZeroShortQuantile { row: pair, level });
    }
    Ok(qn / qd)
}

fn pair_ropes(
    cache: &ActivationCache,
    config: &RopeConfig,
    scheme: &ScalingScheme,
) -> Result<(Rope, Rope)> {
    let scaled = Rope::new(config, scheme)?;
    let plain = Rope::new(config, &ScalingScheme::none(config.num_pairs()))?;
    if cache.long_pairs.vectors.cols() != config.head_dim {
        return Err(Error::DimensionMismatch {
            what: "cached pair vectors vs head_dim".into(),
            expected: config.head_dim,
            got: cache.long_pairs.vectors.cols(),
        });
    }
    if cache.long_pairs.is_empty() {
        return Err(Error::EmptyInput("pair cache"));
    }
    Ok((scaled, plain))
}

/// Per-pair `TIR^A`, pooled over every cached long-context position.
pub fn tir_activation(
    cache: &ActivationCache,
    config: &RopeConfig,
    scheme: &ScalingScheme,
    eps: f64,
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let (scaled, plain) = pair_ropes(cache, config, scheme)?;
    let idx: Vec<usize> = (0..cache.long_pairs.len()).collect();
    par::try_map_range(config.num_pairs(), |i| {
        tir_a_ratio(&cache.long_pairs, &scaled, &plain, i, &idx, 1.0 - eps)
    })
}

/// `TIR^A` restricted to one slice of positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveBin {
    pub start: u64,
    pub end: u64,
    pub samples: usize,
    pub per_pair: Vec<f64>,
}

/// Position-resolved `TIR^A` over `bins` equal-width position slices.
/// Informational only; the search uses the pooled value.
pub fn tir_activation_curve(
    cache: &ActivationCache,
    config: &RopeConfig,
    scheme: &ScalingScheme,
    eps: f64,
    bins: usize,
) -> Result<Vec<CurveBin>> {
    check_eps(eps)?;
    if bins == 0 {
        return Err(Error::config("curve needs at least one bin"));
    }
    let (scaled, plain) = pair_ropes(cache, config, scheme)?;
    let pos = &cache.long_pairs.positions;
    let lo = *pos.iter().min().expect("non-empty");
    let hi = *pos.iter().max().expect("non-empty") + 1;
    let width = (hi - lo).div_ceil(bins as u64).max(1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (j, &m) in pos.iter().enumerate() {
        members[((m - lo) / width) as usize].push(j);
    }
    let mut out = Vec::new();
    for (b, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let per_pair = par::try_map_range(config.num_pairs(), |i| {
            tir_a_ratio(&cache.long_pairs, &scaled, &plain, i, idx, 1.0 - eps)
        })?;
        let start = lo + b as u64 * width;
        out.push(CurveBin {
            start,
            end: (start + width).min(hi),
            samples: idx.len(),
            per_pair,
        });
    }
    Ok(out)
}

/// Collapses per-row `TIR^W` onto pairs (max over heads and both rows).
pub fn tir_w_rows_to_pairs(rows: &[f64], pairing: Pairing, head_dim: usize) -> Result<Vec<f64>> {
    let p = head_dim / 2;
    let heads = check_layout(p, head_dim, rows.len())?;
    Ok((0..p)
        .map(|i| {
            let (a, b) = pairing.pair_indices(head_dim, i);
            (0..heads)
                .flat_map(|h| [rows[h * head_dim + a], rows[h * head_dim + b]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDiagnostics {
    pub band: usize,
    /// Half-open pair range `[lo, hi)`.
    pub pairs: [usize; 2],
    pub omega_med: f64,
    pub omega_ratio: f64,
    pub ip: f64,
    pub tir_w: f64,
    pub tir_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsReport {
    pub version: u32,
    pub eps: f64,
    pub displacement: u64,
    pub pairing: Pairing,
    pub freqs: Vec<f64>,
    pub ip_per_pair: Vec<f64>,
    pub tir_w_per_pair: Vec<f64>,
    pub tir_a_per_pair: Vec<f64>,
    pub bands: Vec<BandDiagnostics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tir_a_curves: Vec<CurveBin>,
}

fn band_max(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    values[range].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Builds the per-band summary using the max over each band's members.
pub fn aggregate_report(
    partition: &BandPartition,
    pairing: Pairing,
    ip: &[f64],
    tir_w_pairs: &[f64],
    tir_a: &[f64],
    eps: f64,
    displacement: u64,
) -> Result<DiagnosticsReport> {
    let p = partition.num_pairs();
    for (what, v) in [("ip", ip), ("tir_w", tir_w_pairs), ("tir_a", tir_a)] {
        if v.len() != p {
            return Err(Error::DimensionMismatch {
                what: format!("{what} vector vs pairs"),
                expected: p,
                got: v.len(),
            });
        }
    }
    let bands = (0..partition.num_bands())
        .map(|b| {
            let r = partition.range(b)?;
            let stats = partition.band_freq_stats(b)?;
            Ok(BandDiagnostics {
                band: b,
                pairs: [r.start, r.end],
                omega_med: stats.median,
                omega_ratio: stats.ratio,
                ip: band_max(ip, r.clone()),
                tir_w: band_max(tir_w_pairs, r.clone()),
                tir_a: band_max(tir_a, r),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = DiagnosticsReport {
        version: REPORT_VERSION,
        eps,
        displacement,
        pairing,
        freqs: partition.freqs().to_vec(),
        ip_per_pair: ip.to_vec(),
        tir_w_per_pair: tir_w_pairs.to_vec(),
        tir_a_per_pair: tir_a.to_vec(),
        bands,
        tir_a_curves: Vec::new(),
    };
    report.validate()?;
    Ok(report)
}

impl DiagnosticsReport {
    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: REPORT_VERSION,
            });
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let per_pair = [&self.ip_per_pair, &self.tir_w_per_pair, &self.tir_a_per_pair];
        if per_pair.iter().any(|v| v.len() != self.freqs.len()) {
            return Err(Error::Schema("per-pair vectors must have one entry per pair".into()));
        }
        let band_vals = self.bands.iter().flat_map(|b| [b.ip, b.tir_w, b.tir_a]);
        if !per_pair
            .iter()
            .flat_map(|v| v.iter().copied())
            .chain(band_vals)
            .all(positive)
        {
            return Err(Error::Schema("diagnostic values must be finite and > 0".into()));
        }
        self.partition().map(|_| ())
    }

    pub fn partition(&self) -> Result<BandPartition> {
        BandPartition::from_ranges(
            self.bands.iter().map(|b| b.pairs[0]..b.pairs[1]).collect(),
            self.freqs.clone(),
        )
    }

    /// Re-aggregates the per-pair vectors under a different partition.
    pub fn rebanded(&self, partition: &BandPartition) -> Result<Self> {
        let mut out = aggregate_report(
            partition,
            self.pairing,
            &self.ip_per_pair,
            &self.tir_w_per_pair,
            &self.tir_a_per_pair,
            self.eps,
            self.displacement,
        )?;
        out.tir_a_curves = self.tir_a_curves.clone();
        Ok(out)
    }

    /// Band indices sorted by descending IP (ties by index).
    pub fn bands_by_pressure(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.bands.len()).collect();
        order.sort_by(|&a, &b| {
            self.bands[b]
                .ip
                .partial_cmp(&self.bands[a].ip)
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }
}

/// Full diagnostics over a bundle: short side is the longest cached length
/// within the training window, long side the longest cached length, and `D`
/// is that length minus one.
pub fn diagnose_bundle(bundle: &ModelBundle, num_bands: usize, eps: f64) -> Result<DiagnosticsReport> {
    let cache = bundle.activation_cache()?;
    let rope = &bundle.rope;
    let displacement = cache.meta.long_length as u64 - 1;
    let ip = interpolation_pressure(rope, &bundle.scheme, displacement)?;
    let mut tir_w = tir_w_rows_to_pairs(
        &tir_weight(&bundle.wq, &cache, eps)?,
        rope.pairing,
        rope.head_dim,
    )?;
    let tir_w_k = tir_w_rows_to_pairs(
        &tir_weight(&bundle.wk, &cache, eps)?,
        rope.pairing,
        rope.head_dim,
    )?;
    for (q, k) in tir_w.iter_mut().zip(tir_w_k) {
        *q = q.max(k);
    }
    let tir_a = tir_activation(&cache, rope, &bundle.scheme, eps)?;
    let partition = crate::bands::partition_log_freq(&pair_frequencies(rope), num_bands)?;
    let mut report = aggregate_report(
        &partition,
        rope.pairing,
        &ip,
        &tir_w,
        &tir_a,
        eps,
        displacement,
    )?;
    report.tir_a_curves = tir_activation_curve(&cache, rope, &bundle.scheme, eps, 8)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::bands::partition_log_freq;
    use crate::rope::{deviation, PairVector, Warp};

    fn sorted_quantile(v: &[f64], level: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let h = (s.len() - 1) as f64 * level;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if frac == 0.0 || lo + 1 >= s.len() {
            s[lo]
        } else {
            s[lo] + frac * (s[lo + 1] - s[lo])
        }
    }

    fn meta() -> CacheMeta {
        CacheMeta {
            short_length: 128,
            long_length: 2048,
            scheme_id: "test".into(),
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn cache_from(short: Matrix, long: Matrix, pairs: PairSamples) -> ActivationCache {
        ActivationCache::new(short, long, pairs.clone(), pairs, meta()).unwrap()
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(pressure(1.0, 64.0, 8.0), 1.0);
        assert_eq!(pressure(0.01, 64.0, 8.0), 0.01);
        assert_eq!(pressure(1.0, 64.0, 1.0), 64.0);
        let cfg = RopeConfig::new(4, 10000.0, Pairing::HalfSplit, 256).unwrap();
        let ip = interpolation_pressure(&cfg, &ScalingScheme::linear(2, 8.0).unwrap(), 64).unwrap();
        assert_eq!(ip, vec![1.0, 0.01]);
        assert!(interpolation_pressure(&cfg, &ScalingScheme::none(2), 0).is_err());
    }

    #[test]
    fn pressure_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let omega: f64 = rng.random_range(1e-4..1.0);
            let s: f64 = rng.random_range(1.0..32.0);
            let d: f64 = rng.random_range(1.0..65536.0);
            let d0 = d.min(256.0);
            let h = 1e-5 * s;
            let fd = (deviation(omega, d, s + h, d0) - deviation(omega, d, s - h, d0)).abs()
                / (2.0 * h);
            let ip = pressure(omega, d, s);
            assert!((ip - fd).abs() <= 1e-6 * ip, "omega {omega} s {s} d {d}");
        }
    }

    #[test]
    fn pressure_monotone_in_frequency_and_displacement() {
        let cfg = RopeConfig::new(32, 10000.0, Pairing::HalfSplit, 256).unwrap();
        let scheme = ScalingScheme::linear(16, 8.0).unwrap();
        let a = interpolation_pressure(&cfg, &scheme, 1000).unwrap();
        let b = interpolation_pressure(&cfg, &scheme, 2000).unwrap();
        assert!(a.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }

    #[test]
    fn quantile_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 0.3).unwrap(), sorted_quantile(&v, 0.3));
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&v, 1.5).is_err());
        assert!(quantile(&[1.0, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn quantile_of_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let v: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q = quantile(&v, 0.99).unwrap();
        assert_eq!(q, sorted_quantile(&v, 0.99));
        assert_abs_diff_eq!(q, 2.326, epsilon = 0.1);
    }

    #[test]
    fn tir_weight_identity_and_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = gaussian(&mut rng, 1200, 8);
        let w = gaussian(&mut rng, 5, 8);
        let pairs = PairSamples::new(gaussian(&mut rng, 10, 4), vec![1; 10]).unwrap();
        let same = cache_from(h.clone(), h.clone(), pairs.clone());
        assert!(tir_weight(&w, &same, 0.01).unwrap().iter().all(|&r| r == 1.0));

        let mut doubled = h.clone();
        doubled.scale(2.0);
        let c = cache_from(h, doubled, pairs);
        assert!(tir_weight(&w, &c, 0.01).unwrap().iter().all(|&r| r == 2.0));
        assert!(tir_weight(&gaussian(&mut rng, 2, 7), &c, 0.01).is_err());
        assert!(tir_weight(&w, &c, 0.0).is_err());
    }

    #[test]
    fn tir_weight_detects_channel_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let short = gaussian(&mut rng, 5000, 6);
        let mut long = gaussian(&mut rng, 5000, 6);
        for r in 0..50 {
            let v = long.get(r * 100, 3);
            long.set(r * 100, 3, 10.0 * v);
        }
        let w = Matrix::from_fn(1, 6, |_, c| if c == 3 { 1.0 } else { 0.0 });
        let pairs = PairSamples::new(gaussian(&mut rng, 4, 4), vec![0; 4]).unwrap();
        let cache = cache_from(short.clone(), long.clone(), pairs);
        let tir = tir_weight(&w, &cache, 0.01).unwrap()[0];
        let col = |m: &Matrix| (0..m.rows()).map(|r| m.get(r, 3).abs()).collect::<Vec<_>>();
        let oracle = sorted_quantile(&col(&long), 0.99) / sorted_quantile(&col(&short), 0.99);
        assert_eq!(tir, oracle);
        assert!(tir > 1.0);
    }

    #[test]
    fn zero_short_quantile_is_error() {
        let short = Matrix::zeros(10, 2);
        let long = Matrix::from_fn(10, 2, |_, _| 1.0);
        let pairs = PairSamples::new(Matrix::zeros(1, 2), vec![0]).unwrap();
        let c = cache_from(short, long, pairs);
        let w = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            tir_weight(&w, &c, 0.01),
            Err(Error::ZeroShortQuantile { row: 0, .. })
        ));
    }

    #[test]
    fn tir_activation_identity_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RopeConfig::new(8, 10000.0, Pairing::HalfSplit, 256).unwrap();
        let pairs =
            PairSamples::new(gaussian(&mut rng, 500, 8), (0..500).map(|m| m * 7).collect())
                .unwrap();
        let h = gaussian(&mut rng, 10, 2);
        let c = cache_from(h.clone(), h, pairs);
        let r = tir_activation(&c, &cfg, &ScalingScheme::none(4), 0.01).unwrap();
        assert!(r.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn tir_activation_eighth_turn() {
        // base (4/pi)^2 makes omega_1 = pi/4; at m = 8 the plain phase is 2*pi
        // and the s = 8 phase is pi/4.
        let base = (4.0 / PI).powi(2);
        let cfg = RopeConfig::new(4, base, Pairing::HalfSplit, 4).unwrap();
        let scheme = ScalingScheme::new(Warp::Identity, vec![1.0, 8.0]).unwrap();
        let v = Matrix::from_fn(20, 4, |_, c| if c <= 1 { 1.0 } else { 0.0 });
        let pairs = PairSamples::new(v, vec![8; 20]).unwrap();
        let h = Matrix::from_fn(2, 2, |_, _| 1.0);
        let c = cache_from(h.clone(), h, pairs);
        let r = tir_activation(&c, &cfg, &scheme, 0.01).unwrap();
        assert_abs_diff_eq!(r[1], (PI / 4.0).cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(r[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn curve_bins_cover_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RopeConfig::new(8, 10000.0, Pairing::Interleaved, 256).unwrap();
        let n = 400;
        let pairs =
            PairSamples::new(gaussian(&mut rng, n, 8), (0..n as u64).map(|m| m * 5).collect())
                .unwrap();
        let h = gaussian(&mut rng, 10, 2);
        let c = cache_from(h.clone(), h, pairs);
        let scheme = ScalingScheme::linear(4, 8.0).unwrap();
        let bins = tir_activation_curve(&c, &cfg, &scheme, 0.05, 4).unwrap();
        assert_eq!(bins.len(), 4);
        assert_eq!(bins.iter().map(|b| b.samples).sum::<usize>(), n);
        assert!(bins.iter().all(|b| b.per_pair.len() == 4));
    }

    #[test]
    fn aggregate_takes_band_max() {
        let part = partition_log_freq(&[1.0, 0.01], 1).unwrap();
        let r = aggregate_report(
            &part,
            Pairing::HalfSplit,
            &[1.0, 0.01],
            &[1.1, 1.3],
            &[0.9, 1.0],
            0.01,
            64,
        )
        .unwrap();
        assert_eq!((r.bands[0].ip, r.bands[0].tir_w, r.bands[0].tir_a), (1.0, 1.3, 1.0));

        let flat = partition_log_freq(&[1.0, 0.5, 0.25, 0.125], 2).unwrap();
        let r = aggregate_report(&flat, Pairing::HalfSplit, &[2.0; 4], &[2.0; 4], &[2.0; 4], 0.01, 9)
            .unwrap();
        assert!(r.bands.iter().all(|b| b.ip == 2.0 && b.tir_w == 2.0 && b.tir_a == 2.0));
        assert!(aggregate_report(&flat, Pairing::HalfSplit, &[1.0; 3], &[1.0; 4], &[1.0; 4], 0.01, 9)
            .is_err());
    }

    #[test]
    fn aggregate_matches_brute_force_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let freqs: Vec<f64> = (0..24).map(|i| 0.7f64.powi(i)).collect();
        for b in 1..=8 {
            let part = partition_log_freq(&freqs, b).unwrap();
            let mk = |rng: &mut ChaCha8Rng| (0..24).map(|_| rng.random_range(0.1..5.0)).collect::<Vec<f64>>();
            let (ip, tw, ta) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let r = aggregate_report(&part, Pairing::HalfSplit, &ip, &tw, &ta, 0.01, 100).unwrap();
            for (band, bd) in r.bands.iter().enumerate() {
                let mut best = [f64::MIN; 3];
                for i in 0..24 {
                    if part.band_of_pair(i) == Some(band) {
                        best[0] = best[0].max(ip[i]);
                        best[1] = best[1].max(tw[i]);
                        best[2] = best[2].max(ta[i]);
                    }
                }
                assert_eq!([bd.ip, bd.tir_w, bd.tir_a], best);
            }
        }
    }

    #[test]
    fn rows_to_pairs_max_over_heads() {
        // head_dim 4, 2 heads, half split: pair 0 -> rows {0,2,4,6}.
        let rows = [1.0, 2.0, 3.0, 0.5, 0.1, 0.2, 0.3, 9.0];
        assert_eq!(
            tir_w_rows_to_pairs(&rows, Pairing::HalfSplit, 4).unwrap(),
            vec![3.0, 9.0]
        );
        assert_eq!(
            tir_w_rows_to_pairs(&rows, Pairing::Interleaved, 4).unwrap(),
            vec![2.0, 9.0]
        );
    }

    #[test]
    fn report_json_field_names() {
        let part = partition_log_freq(&[1.0, 0.1], 2).unwrap();
        let r = aggregate_report(&part, Pairing::HalfSplit, &[1.0, 0.5], &[1.0, 1.2], &[1.0, 1.1], 0.01, 2047)
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["ip_per_pair", "bands", "eps", "displacement"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        for k in ["ip", "tir_w", "tir_a"] {
            assert!(v["bands"][0].get(k).is_some(), "{k}");
        }
        let back: DiagnosticsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.bands_by_pressure(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn quantile_matches_sort_oracle(
            v in prop::collection::vec(-1e6f64..1e6, 1..2000),
            level in 0.0f64..=1.0,
        ) {
            prop_assert_eq!(quantile(&v, level).unwrap(), sorted_quantile(&v, level));
        }

        #[test]
        fn tir_activation_rotation_pair_values(
            x in -5.0f64..5.0, y in -5.0f64..5.0, m in 0u64..10_000,
        ) {
            // One sample: ratio is the ratio of the two rotated inf-norms.
            let cfg = RopeConfig::new(2, 10000.0, Pairing::HalfSplit, 256).unwrap();
            let scheme = ScalingScheme::linear(1, 8.0).unwrap();
            prop_assume!(x.abs().max(y.abs()) > 1e-3);
            let pairs = PairSamples::new(Matrix::new(1, 2, vec![x, y]).unwrap(), vec![m]).unwrap();
            let h = Matrix::from_fn(1, 1, |_, _| 1.0);
            let c = cache_from(h.clone(), h, pairs);
            let r = tir_activation(&c, &cfg, &scheme, 0.5).unwrap()[0];
            let u = PairVector::new(x, y);
            let want = rotate_pair(u, m as f64 / 8.0).inf_norm() / rotate_pair(u, m as f64).inf_norm();
            prop_assert!((r - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}
