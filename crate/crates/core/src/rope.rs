//! Rotary position embedding: pair frequencies, scaled phases under position
//! interpolation, and the 2-D pair rotations applied to query/key vectors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Which coordinates of a head vector form RoPE pair `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Pair `i` is `(i, i + P)`; the layout used by LLaMA-family checkpoints.
    #[default]
    HalfSplit,
    /// Pair `i` is `(2i, 2i + 1)`.
    Interleaved,
}

impl Pairing {
    #[inline]
    pub fn pair_indices(self, head_dim: usize, pair: usize) -> (usize, usize) {
        match self {
            Pairing::HalfSplit => (pair, pair + head_dim / 2),
            Pairing::Interleaved => (2 * pair, 2 * pair + 1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::HalfSplit => "half_split",
            Pairing::Interleaved => "interleaved",
        }
    }
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_split" => Ok(Pairing::HalfSplit),
            "interleaved" => Ok(Pairing::Interleaved),
            other => Err(Error::config(format!("unknown pairing `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    #[serde(default)]
    pub pairing: Pairing,
    /// Largest displacement seen in training (L_0).
    pub train_window: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64, pairing: Pairing, train_window: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            base,
            pairing,
            train_window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be a positive even integer, got {}",
                self.head_dim
            )));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::config(format!("rope base must be > 1, got {}", self.base)));
        }
        if self.train_window == 0 {
            return Err(Error::config("train_window must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn num_pairs(&self) -> usize {
        self.head_dim / 2
    }
}

/// Position warp `f(m)`. Only the identity is supported for now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warp {
    #[default]
    Identity,
}

impl Warp {
    #[inline]
    pub fn apply(self, position: f64) -> f64 {
        match self {
            Warp::Identity => position,
        }
    }
}

/// Per-pair frequency divisors `s_i` plus the position warp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingScheme {
    #[serde(default)]
    pub warp: Warp,
    pub scales: Vec<f64>,
}

impl ScalingScheme {
    pub fn new(warp: Warp, scales: Vec<f64>) -> Result<Self> {
        let scheme = Self { warp, scales };
        if scheme.scales.is_empty() {
            return Err(Error::EmptyInput("scaling scheme scales"));
        }
        if let Some(s) = scheme.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("scheme scales must be positive, got {s}")));
        }
        Ok(scheme)
    }

    /// No interpolation: every `s_i = 1`.
    pub fn none(num_pairs: usize) -> Self {
        Self {
            warp: Warp::Identity,
            scales: vec![1.0; num_pairs],
        }
    }

    /// Linear position interpolation: every pair divided by `factor`.
    pub fn linear(num_pairs: usize, factor: f64) -> Result<Self> {
        Self::new(Warp::Identity, vec![factor; num_pairs])
    }

    /// YaRN-style frequency-aware ramp. Pairs completing fewer than `alpha`
    /// rotations inside the training window are fully interpolated by
    /// `factor`; pairs completing more than `beta` are left alone; in between
    /// the effective frequency blends linearly between the two.
    pub fn yarn(config: &RopeConfig, factor: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(factor >= 1.0 && factor.is_finite()) {
            return Err(Error::config(format!("yarn factor must be >= 1, got {factor}")));
        }
        if !(beta > alpha && alpha >= 0.0) {
            return Err(Error::config(format!(
                "yarn ramp needs 0 <= alpha < beta, got [{alpha}, {beta}]"
            )));
        }
        let l0 = config.train_window as f64;
        let scales = pair_frequencies(config)
            .into_iter()
            .map(|omega| {
                let rotations = l0 * omega / (2.0 * PI);
                let blend = ((rotations - alpha) / (beta - alpha)).clamp(0.0, 1.0);
                1.0 / ((1.0 - blend) / factor + blend)
            })
            .collect();
        Self::new(Warp::Identity, scales)
    }

    pub fn validate_for(&self, config: &RopeConfig) -> Result<()> {
        if self.scales.len() != config.num_pairs() {
            return Err(Error::DimensionMismatch {
                what: "scaling scheme length vs rope pairs".into(),
                expected: config.num_pairs(),
                got: self.scales.len(),
            });
        }
        Self::new(self.warp, self.scales.clone()).map(|_| ())
    }

    pub fn is_identity(&self) -> bool {
        self.warp == Warp::Identity && self.scales.iter().all(|&s| s == 1.0)
    }

    /// Short human-readable tag stored with caches and reports.
    pub fn id(&self) -> String {
        if self.is_identity() {
            "none".to_string()
        } else if self.scales.windows(2).all(|w| w[0] == w[1]) {
            format!("linear:{}", self.scales[0])
        } else {
            "per_pair".to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairVector {
    pub x: f64,
    pub y: f64,
}

impl PairVector {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn inf_norm(self) -> f64 {
        self.x.abs().max(self.y.abs())
    }

    #[inline]
    pub fn scaled(self, c: f64) -> Self {
        Self::new(c * self.x, c * self.y)
    }
}

/// `ω_i = base^(-2i/d)` for `i = 0..P`.
pub fn pair_frequencies(config: &RopeConfig) -> Vec<f64> {
    let d = config.head_dim as f64;
    (0..config.num_pairs())
        .map(|i| config.base.powf(-2.0 * i as f64 / d))
        .collect()
}

#[inline]
pub(crate) fn phase_of(omega: f64, warped: f64, scale: f64) -> f64 {
    omega * (warped / scale)
}

fn check_pair(config: &RopeConfig, scheme: &ScalingScheme, pair: usize) -> Result<()> {
    let p = config.num_pairs();
    if pair >= p {
        return Err(Error::IndexOutOfRange {
            what: "rope pair",
            index: pair,
            len: p,
        });
    }
    if scheme.scales.len() != p {
        return Err(Error::DimensionMismatch {
            what: "scaling scheme length vs rope pairs".into(),
            expected: p,
            got: scheme.scales.len(),
        });
    }
    Ok(())
}

/// `ω_i · f(m) / s_i`.
pub fn scaled_phase(
    config: &RopeConfig,
    scheme: &ScalingScheme,
    position: u64,
    pair: usize,
) -> Result<f64> {
    check_pair(config, scheme, pair)?;
    let omega = config.base.powf(-2.0 * pair as f64 / config.head_dim as f64);
    Ok(phase_of(
        omega,
        scheme.warp.apply(position as f64),
        scheme.scales[pair],
    ))
}

#[inline]
pub fn rotate_pair(u: PairVector, phase: f64) -> PairVector {
    let (s, c) = phase.sin_cos();
    PairVector::new(u.x * c - u.y * s, u.x * s + u.y * c)
}

/// Rotates every pair of a head vector by its scaled phase at `position`.
pub fn rotate_vector(
    v: &[f64],
    config: &RopeConfig,
    scheme: &ScalingScheme,
    position: u64,
) -> Result<Vec<f64>> {
    let rope = Rope::new(config, scheme)?;
    if v.len() != config.head_dim {
        return Err(Error::DimensionMismatch {
            what: "vector length vs head_dim".into(),
            expected: config.head_dim,
            got: v.len(),
        });
    }
    ensure_finite(v, "rotate_vector input")?;
    let mut out = v.to_vec();
    rope.rotate_in_place(&mut out, position);
    Ok(out)
}

/// `ω_i · (f(D)/s_i − D_0)`. `reference` (D_0) is caller-supplied; the usual
/// choice is `min(D, L_0)`.
pub fn phase_deviation(
    config: &RopeConfig,
    scheme: &ScalingScheme,
    displacement: u64,
    reference: f64,
    pair: usize,
) -> Result<f64> {
    check_pair(config, scheme, pair)?;
    let omega = config.base.powf(-2.0 * pair as f64 / config.head_dim as f64);
    Ok(deviation(
        omega,
        scheme.warp.apply(displacement as f64),
        scheme.scales[pair],
        reference,
    ))
}

#[inline]
pub fn deviation(omega: f64, warped_displacement: f64, scale: f64, reference: f64) -> f64 {
    omega * (warped_displacement / scale - reference)
}

/// A config and scheme compiled into per-pair frequencies for repeated use.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    pairing: Pairing,
    warp: Warp,
    freqs: Vec<f64>,
    scales: Vec<f64>,
}

impl Rope {
    pub fn new(config: &RopeConfig, scheme: &ScalingScheme) -> Result<Self> {
        config.validate()?;
        scheme.validate_for(config)?;
        Ok(Self {
            head_dim: config.head_dim,
            pairing: config.pairing,
            warp: scheme.warp,
            freqs: pair_frequencies(config),
            scales: scheme.scales.clone(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_pairs(&self) -> usize {
        self.freqs.len()
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    #[inline]
    pub fn phase(&self, position: u64, pair: usize) -> f64 {
        phase_of(
            self.freqs[pair],
            self.warp.apply(position as f64),
            self.scales[pair],
        )
    }

    #[inline]
    pub fn pair(&self, v: &[f64], pair: usize) -> PairVector {
        let (a, b) = self.pairing.pair_indices(self.head_dim, pair);
        PairVector::new(v[a], v[b])
    }

    /// Rotates one head vector in place. `v.len()` must equal `head_dim`.
    pub fn rotate_in_place(&self, v: &mut [f64], position: u64) {
        debug_assert_eq!(v.len(), self.head_dim);
        for i in 0..self.freqs.len() {
            let (a, b) = self.pairing.pair_indices(self.head_dim, i);
            let r = rotate_pair(PairVector::new(v[a], v[b]), self.phase(position, i));
            v[a] = r.x;
            v[b] = r.y;
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn cfg(d: usize, base: f64, pairing: Pairing) -> RopeConfig {
        RopeConfig::new(d, base, pairing, 256).unwrap()
    }

    #[test]
    fn frequencies_worked_examples() {
        assert_eq!(pair_frequencies(&cfg(4, 10000.0, Pairing::HalfSplit)), vec![1.0, 0.01]);
        assert_eq!(pair_frequencies(&cfg(2, 10000.0, Pairing::HalfSplit)), vec![1.0]);
        // 100^(-2i/8) = 10^(-i/2), recomputed via repeated division by sqrt(10).
        let f = pair_frequencies(&cfg(8, 100.0, Pairing::HalfSplit));
        let r = 10f64.sqrt();
        let oracle = [1.0, 1.0 / r, 1.0 / 10.0, 1.0 / (10.0 * r)];
        for (a, b) in f.iter().zip(oracle) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(f[1], 0.3162, epsilon = 5e-5);
        assert_abs_diff_eq!(f[3], 0.03162, epsilon = 5e-6);
    }

    #[test]
    fn frequencies_strictly_decreasing() {
        let f = pair_frequencies(&cfg(128, 500000.0, Pairing::HalfSplit));
        assert_eq!(f[0], 1.0);
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_configs() {
        assert!(RopeConfig::new(15, 10000.0, Pairing::HalfSplit, 256).is_err());
        assert!(RopeConfig::new(0, 10000.0, Pairing::HalfSplit, 256).is_err());
        assert!(RopeConfig::new(8, 1.0, Pairing::HalfSplit, 256).is_err());
        assert!(ScalingScheme::new(Warp::Identity, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn scaled_phase_examples() {
        let c = cfg(4, 10000.0, Pairing::HalfSplit);
        let s = ScalingScheme::new(Warp::Identity, vec![8.0, 4.0]).unwrap();
        assert_eq!(scaled_phase(&c, &s, 16, 0).unwrap(), 2.0);
        assert_eq!(scaled_phase(&c, &ScalingScheme::none(2), 16, 0).unwrap(), 16.0);
        assert_abs_diff_eq!(scaled_phase(&c, &s, 1000, 1).unwrap(), 2.5, epsilon = 1e-12);
        assert!(matches!(
            scaled_phase(&c, &s, 1, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn rotate_pair_examples() {
        let r = rotate_pair(PairVector::new(1.0, 0.0), FRAC_PI_2);
        assert_abs_diff_eq!(r.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.y, 1.0, epsilon = 1e-15);
        assert_eq!(rotate_pair(PairVector::new(3.0, 4.0), 0.0), PairVector::new(3.0, 4.0));
        let r = rotate_pair(PairVector::new(1.0, 1.0), PI);
        assert_abs_diff_eq!(r.x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.y, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn rotate_vector_pairing_conventions() {
        let half = cfg(4, 10000.0, Pairing::HalfSplit);
        let inter = cfg(4, 10000.0, Pairing::Interleaved);
        let v = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(rotate_vector(&v, &half, &ScalingScheme::none(2), 0).unwrap(), v.to_vec());

        // omega_0 = 1, m = 1, s_0 = 2/pi gives phase pi/2 on pair 0.
        let quarter = ScalingScheme::new(Warp::Identity, vec![2.0 / PI, 1.0]).unwrap();
        let out = rotate_vector(&v, &half, &quarter, 1).unwrap();
        for (a, b) in out.iter().zip([0.0, 0.0, 1.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let out = rotate_vector(&v, &inter, &quarter, 1).unwrap();
        for (a, b) in out.iter().zip([0.0, 1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(rotate_vector(&v[..3], &half, &quarter, 1).is_err());
    }

    #[test]
    fn phase_deviation_examples() {
        let c = cfg(2, 10000.0, Pairing::HalfSplit);
        let s8 = ScalingScheme::linear(1, 8.0).unwrap();
        assert_eq!(phase_deviation(&c, &s8, 64, 8.0, 0).unwrap(), 0.0);
        assert_eq!(phase_deviation(&c, &ScalingScheme::none(1), 64, 0.0, 0).unwrap(), 64.0);
        assert_eq!(deviation(0.5, 100.0, 4.0, 10.0), 7.5);
        assert!(phase_deviation(&c, &s8, 64, 8.0, 1).is_err());
    }

    #[test]
    fn yarn_ramp_endpoints() {
        let c = cfg(128, 10000.0, Pairing::HalfSplit);
        let s = ScalingScheme::yarn(&c, 8.0, 1.0, 32.0).unwrap();
        // Highest frequency rotates ~40 times in 256 positions: untouched.
        assert_eq!(s.scales[0], 1.0);
        // Lowest frequency barely rotates: fully interpolated.
        assert_abs_diff_eq!(*s.scales.last().unwrap(), 8.0, epsilon = 1e-12);
        assert!(s.scales.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn large_positions_keep_precision() {
        let c = cfg(2, 10000.0, Pairing::HalfSplit);
        let m = 1u64 << 20;
        let phase = scaled_phase(&c, &ScalingScheme::none(1), m, 0).unwrap();
        assert_eq!(phase, m as f64);
    }

    proptest! {
        #[test]
        fn norm_preserved(
            v in prop::collection::vec(-100.0f64..100.0, 16),
            m in 0u64..(1 << 20),
            factor in 1.0f64..32.0,
            interleaved in any::<bool>(),
        ) {
            let pairing = if interleaved { Pairing::Interleaved } else { Pairing::HalfSplit };
            let c = cfg(16, 10000.0, pairing);
            let s = ScalingScheme::yarn(&c, factor, 1.0, 32.0).unwrap();
            let out = rotate_vector(&v, &c, &s, m).unwrap();
            let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n1 - n0).abs() <= 1e-6 * n0.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn rotations_compose(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
            a in -1000.0f64..1000.0, b in -1000.0f64..1000.0,
        ) {
            let u = PairVector::new(x, y);
            let two = rotate_pair(rotate_pair(u, a), b);
            let one = rotate_pair(u, a + b);
            prop_assert!((two.x - one.x).abs() <= 1e-9 && (two.y - one.y).abs() <= 1e-9);
        }

        #[test]
        fn rotation_is_linear(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
            c in -10.0f64..10.0, phi in -100.0f64..100.0,
        ) {
            let u = PairVector::new(x, y);
            let lhs = rotate_pair(u.scaled(c), phi);
            let rhs = rotate_pair(u, phi).scaled(c);
            prop_assert!((lhs.x - rhs.x).abs() <= 1e-12 * (1.0 + c.abs() * 10.0));
            prop_assert!((lhs.y - rhs.y).abs() <= 1e-12 * (1.0 + c.abs() * 10.0));
        }

        #[test]
        fn identity_scheme_is_plain_phase(m in 0u64..(1 << 20), pair in 0usize..8) {
            let c = cfg(16, 10000.0, Pairing::HalfSplit);
            let omega = pair_frequencies(&c)[pair];
            prop_assert_eq!(
                scaled_phase(&c, &ScalingScheme::none(8), m, pair).unwrap(),
                omega * m as f64
            );
        }
    }
}
