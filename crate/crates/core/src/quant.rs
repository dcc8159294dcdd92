//! Round-to-nearest uniform quantization of projection weights, plus the
//! per-token activation fake-quant used for W-A configurations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per output row.
    PerOutputChannel,
    /// Contiguous blocks of `group_size` input columns within each output
    /// row. A shorter tail group is allowed.
    PerGroup { group_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub symmetric: bool,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity, symmetric: bool) -> Result<Self> {
        let spec = Self {
            bits,
            granularity,
            symmetric,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn symmetric(bits: u8, granularity: Granularity) -> Result<Self> {
        Self::new(bits, granularity, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::config(format!(
                "quantization bits must be in [2, 8], got {}",
                self.bits
            )));
        }
        if let Granularity::PerGroup { group_size: 0 } = self.granularity {
            return Err(Error::config("group_size must be positive"));
        }
        Ok(())
    }

    /// Largest code magnitude in symmetric mode, `2^(b-1) - 1`.
    #[inline]
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Number of levels minus one in asymmetric mode, `2^b - 1`.
    #[inline]
    fn levels(&self) -> i32 {
        (1 << self.bits) - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    /// One scale per quantization group, in group order.
    pub scales: Vec<f64>,
    /// Asymmetric mode only; empty for symmetric tensors.
    pub zero_points: Vec<i32>,
    pub spec: QuantSpec,
    pub rows: usize,
    pub cols: usize,
}

impl QuantizedTensor {
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        group_index(self.spec.granularity, self.cols, r, c)
    }
}

fn groups_per_row(granularity: Granularity, cols: usize) -> usize {
    match granularity {
        Granularity::PerGroup { group_size } => cols.div_ceil(group_size),
        _ => 1,
    }
}

#[inline]
fn group_index(granularity: Granularity, cols: usize, r: usize, c: usize) -> usize {
    match granularity {
        Granularity::PerTensor => 0,
        Granularity::PerOutputChannel => r,
        Granularity::PerGroup { group_size } => {
            r * groups_per_row(granularity, cols) + c / group_size
        }
    }
}

fn num_groups(granularity: Granularity, rows: usize, cols: usize) -> usize {
    match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerOutputChannel => rows,
        Granularity::PerGroup { .. } => rows * groups_per_row(granularity, cols),
    }
}

/// `max|x| / qmax`, nudged to a fixed point of `s -> (qmax * s) / qmax` in
/// floating point. Re-quantizing a dequantized group then recovers the same
/// scale bit for bit, which makes `fake_quant` exactly idempotent.
fn symmetric_scale(max_abs: f64, qmax: i32) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let q = qmax as f64;
    let mut s = max_abs / q;
    for _ in 0..8 {
        let next = (q * s) / q;
        if next == s {
            return s;
        }
        s = next;
    }
    s
}

/// Round-to-nearest quantization, ties to even.
pub fn quantize_rtn(weights: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    ensure_finite(weights.as_slice(), "quantize_rtn input")?;
    let (rows, cols) = (weights.rows(), weights.cols());
    let g = spec.granularity;
    let n_groups = num_groups(g, rows, cols);

    let mut lo = vec![0.0f64; n_groups];
    let mut hi = vec![0.0f64; n_groups];
    for r in 0..rows {
        for (c, &x) in weights.row(r).iter().enumerate() {
            let k = group_index(g, cols, r, c);
            lo[k] = lo[k].min(x);
            hi[k] = hi[k].max(x);
        }
    }

    let mut codes = Vec::with_capacity(rows * cols);
    if spec.symmetric {
        let qmax = spec.qmax();
        let scales: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| symmetric_scale(l.abs().max(h.abs()), qmax))
            .collect();
        for r in 0..rows {
            for (c, &x) in weights.row(r).iter().enumerate() {
                let s = scales[group_index(g, cols, r, c)];
                let code = (x / s).round_ties_even().clamp(-qmax as f64, qmax as f64);
                codes.push(code as i32);
            }
        }
        Ok(QuantizedTensor {
            codes,
            scales,
            zero_points: Vec::new(),
            spec: *spec,
            rows,
            cols,
        })
    } else {
        let levels = spec.levels();
        let mut scales = Vec::with_capacity(n_groups);
        let mut zero_points = Vec::with_capacity(n_groups);
        for (l, h) in lo.iter().zip(&hi) {
            let range = h - l;
            let s = if range == 0.0 { 1.0 } else { range / levels as f64 };
            let z = (-l / s).round_ties_even().clamp(0.0, levels as f64);
            scales.push(s);
            zero_points.push(z as i32);
        }
        for r in 0..rows {
            for (c, &x) in weights.row(r).iter().enumerate() {
                let k = group_index(g, cols, r, c);
                let code = ((x / scales[k]).round_ties_even() + zero_points[k] as f64)
                    .clamp(0.0, levels as f64);
                codes.push(code as i32);
            }
        }
        Ok(QuantizedTensor {
            codes,
            scales,
            zero_points,
            spec: *spec,
            rows,
            cols,
        })
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let g = q.spec.granularity;
    let symmetric = q.zero_points.is_empty();
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        let k = group_index(g, q.cols, r, c);
        let code = q.codes[r * q.cols + c];
        if symmetric {
            code as f64 * q.scales[k]
        } else {
            (code - q.zero_points[k]) as f64 * q.scales[k]
        }
    })
}

/// `dequantize(quantize_rtn(x))`. Exactly idempotent in symmetric mode.
pub fn fake_quant(x: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    Ok(dequantize(&quantize_rtn(x, spec)?))
}

/// Dynamic per-token symmetric fake-quant: each row (token) gets its own
/// scale computed from that row alone.
pub fn fake_quant_tokens(x: &Matrix, bits: u8) -> Result<Matrix> {
    fake_quant(x, &QuantSpec::symmetric(bits, Granularity::PerOutputChannel)?)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn w4() -> QuantSpec {
        QuantSpec::symmetric(4, Granularity::PerTensor).unwrap()
    }

    /// Brute-force nearest code: scan the whole code range and keep the one
    /// minimizing |x - c*s|, breaking exact ties toward the even code.
    fn nearest_code(x: f64, s: f64, qmax: i32) -> i32 {
        let mut best = -qmax;
        for c in -qmax..=qmax {
            let d = (x - c as f64 * s).abs();
            let db = (x - best as f64 * s).abs();
            if d < db || (d == db && c % 2 == 0) {
                best = c;
            }
        }
        best
    }

    #[test]
    fn worked_example_w4() {
        let q = quantize_rtn(&row(&[0.7, -0.35, 0.1]), &w4()).unwrap();
        assert_eq!(q.codes, vec![7, -4, 1]);
        assert_abs_diff_eq!(q.scales[0], 0.1, epsilon = 1e-15);
        // The oracle agrees for every element; -0.35 sits on the -3.5 tie.
        let s = q.scales[0];
        for (x, c) in [0.7, -0.35, 0.1].iter().zip(&q.codes) {
            assert_eq!(nearest_code(*x, s, 7), *c);
        }
        // The decimal 0.1 step puts -0.35 / 0.1 just inside the tie, so -3.
        assert_eq!(nearest_code(-0.35, 0.1, 7), -3);
    }

    #[test]
    fn all_zero_group() {
        let q = quantize_rtn(&row(&[0.0, 0.0, 0.0]), &w4()).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.codes, vec![0, 0, 0]);
        assert_eq!(dequantize(&q).into_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_element_exact() {
        let q = quantize_rtn(&row(&[1.4]), &w4()).unwrap();
        assert_eq!(q.codes, vec![7]);
        assert_abs_diff_eq!(q.scales[0], 0.2, epsilon = 1e-15);
        assert_eq!(dequantize(&q).into_vec(), vec![1.4]);
    }

    #[test]
    fn dequantize_examples() {
        let mk = |codes: Vec<i32>, s: f64| QuantizedTensor {
            rows: 1,
            cols: codes.len(),
            codes,
            scales: vec![s],
            zero_points: vec![],
            spec: w4(),
        };
        let d = dequantize(&mk(vec![7, -4, 1], 0.1)).into_vec();
        for (a, b) in d.iter().zip([0.7, -0.4, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(dequantize(&mk(vec![0], 1.0)).into_vec(), vec![0.0]);
        assert_abs_diff_eq!(dequantize(&mk(vec![7], 0.2)).get(0, 0), 1.4, epsilon = 1e-15);
    }

    #[test]
    fn fake_quant_example() {
        let y = fake_quant(&row(&[0.7, -0.35, 0.1]), &w4()).unwrap();
        for (a, b) in y.as_slice().iter().zip([0.7, -0.4, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(fake_quant(&y, &w4()).unwrap(), y);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(quantize_rtn(&row(&[f64::NAN]), &w4()).is_err());
        assert!(QuantSpec::symmetric(1, Granularity::PerTensor).is_err());
        assert!(QuantSpec::symmetric(9, Granularity::PerTensor).is_err());
        assert!(QuantSpec::symmetric(4, Granularity::PerGroup { group_size: 0 }).is_err());
    }

    #[test]
    fn group_layout_with_tail() {
        let spec = QuantSpec::symmetric(4, Granularity::PerGroup { group_size: 4 }).unwrap();
        let m = Matrix::from_fn(2, 10, |r, c| (r * 10 + c) as f64 + 1.0);
        let q = quantize_rtn(&m, &spec).unwrap();
        assert_eq!(q.scales.len(), 6);
        assert_eq!(q.group_of(1, 9), 5);
        // Each group's maximum lands on +qmax.
        assert_eq!(q.codes[3], 7);
        assert_eq!(q.codes[9], 7);
    }

    #[test]
    fn per_channel_scale_per_row() {
        let spec = QuantSpec::symmetric(8, Granularity::PerOutputChannel).unwrap();
        let m = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let q = quantize_rtn(&m, &spec).unwrap();
        assert_eq!(q.scales.len(), 2);
        assert_eq!(q.codes[1], -127);
        assert_eq!(q.codes[2], 127);
    }

    #[test]
    fn asymmetric_round_trip_error() {
        let spec = QuantSpec::new(4, Granularity::PerTensor, false).unwrap();
        let m = row(&[0.0, 0.3, 1.5, 2.0]);
        let q = quantize_rtn(&m, &spec).unwrap();
        assert!(q.codes.iter().all(|&c| (0..=15).contains(&c)));
        let d = dequantize(&q);
        let s = q.scales[0];
        for (a, b) in m.as_slice().iter().zip(d.as_slice()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn error_shrinks_with_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let m = Matrix::from_fn(16, 32, |_, _| rng.random_range(-3.0..3.0));
            for gran in [
                Granularity::PerTensor,
                Granularity::PerOutputChannel,
                Granularity::PerGroup { group_size: 8 },
            ] {
                let err = |bits| {
                    let spec = QuantSpec::symmetric(bits, gran).unwrap();
                    let y = fake_quant(&m, &spec).unwrap();
                    m.as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .fold(0.0f64, |e, (a, b)| e.max((a - b).abs()))
                };
                for bits in 3..=8 {
                    assert!(err(bits) <= err(bits - 1), "trial {trial} bits {bits} {gran:?}");
                }
            }
        }
    }

    fn granularity() -> impl Strategy<Value = Granularity> {
        prop_oneof![
            Just(Granularity::PerTensor),
            Just(Granularity::PerOutputChannel),
            (1usize..9).prop_map(|group_size| Granularity::PerGroup { group_size }),
        ]
    }

    proptest! {
        #[test]
        fn error_within_half_step(
            data in prop::collection::vec(-1e3f64..1e3, 1..64),
            bits in 2u8..=8,
            gran in granularity(),
        ) {
            let cols = data.len();
            let m = row(&data);
            let spec = QuantSpec::symmetric(bits, gran).unwrap();
            let q = quantize_rtn(&m, &spec).unwrap();
            let y = dequantize(&q);
            for c in 0..cols {
                let s = q.scales[q.group_of(0, c)];
                prop_assert!((m.get(0, c) - y.get(0, c)).abs() <= s / 2.0 + 1e-12);
                prop_assert!(q.codes[c].abs() <= spec.qmax());
            }
        }

        #[test]
        fn fake_quant_idempotent(
            data in prop::collection::vec(-1e3f64..1e3, 1..64),
            bits in 2u8..=8,
            gran in granularity(),
        ) {
            let m = row(&data);
            let spec = QuantSpec::symmetric(bits, gran).unwrap();
            let once = fake_quant(&m, &spec).unwrap();
            let twice = fake_quant(&once, &spec).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn codes_invariant_under_positive_scaling(
            data in prop::collection::vec(-10.0f64..10.0, 1..64),
            c in 1e-3f64..1e3,
            bits in 2u8..=8,
        ) {
            let spec = QuantSpec::symmetric(bits, Granularity::PerTensor).unwrap();
            let a = quantize_rtn(&row(&data), &spec).unwrap();
            let scaled: Vec<f64> = data.iter().map(|x| c * x).collect();
            let b = quantize_rtn(&row(&scaled), &spec).unwrap();
            prop_assert_eq!(&a.codes, &b.codes);
            if a.scales[0] != 1.0 || data.iter().any(|&x| x != 0.0) {
                prop_assert!((b.scales[0] - c * a.scales[0]).abs() <= 1e-12 * b.scales[0]);
            }
        }
    }
}
