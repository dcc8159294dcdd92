//! Desk-scale synthetic bundles with band-targeted activation outliers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use super::{Context, ModelBundle, ModelDims};
use crate::bands::partition_log_freq;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{Granularity, QuantSpec};
use crate::rope::{pair_frequencies, Pairing, RopeConfig, ScalingScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDims {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub train_window: usize,
    /// Linear interpolation factor `s`.
    pub pi_factor: f64,
    pub base: f64,
    pub pairing: Pairing,
    pub lengths: Vec<usize>,
    /// Minimum cached tokens per length; short lengths get several sequences.
    pub tokens_per_length: usize,
    pub quant: Option<QuantSpec>,
}

impl Default for SynthDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            head_dim: 16,
            train_window: 256,
            pi_factor: 8.0,
            base: 10000.0,
            pairing: Pairing::HalfSplit,
            lengths: vec![128, 512, 2048],
            tokens_per_length: 4096,
            quant: Some(
                QuantSpec::symmetric(4, Granularity::PerTensor).expect("4 bits is a valid width"),
            ),
        }
    }
}

/// Which bands get outliers and how strong they are.
///
/// Outlier hidden channels are Student-t distributed and grow linearly with
/// position past the training window. Only the `W_Q` rows of the targeted
/// bands read those channels, with weights amplified by `weight_gain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    /// Targeted bands under a `num_bands` partition. Empty disables outliers.
    pub bands: Vec<usize>,
    pub num_bands: usize,
    pub channels: usize,
    pub magnitude: f64,
    /// Extra multiple of the magnitude per training window past `L0`.
    pub growth: f64,
    pub weight_gain: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            bands: vec![1],
            num_bands: 8,
            channels: 2,
            magnitude: 3.0,
            growth: 1.0,
            weight_gain: 8.0,
        }
    }
}

impl OutlierSpec {
    pub fn none() -> Self {
        Self {
            bands: Vec::new(),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic bundle for `seed`. Values are rounded to f32 so a saved and
/// reloaded bundle is identical to the in-memory one.
pub fn synth_model(seed: u64, dims: &SynthDims, outliers: &OutlierSpec) -> Result<ModelBundle> {
    let model = ModelDims {
        d_model: dims.d_model,
        heads: dims.heads,
        head_dim: dims.head_dim,
    };
    model.validate()?;
    let rope = RopeConfig::new(dims.head_dim, dims.base, dims.pairing, dims.train_window)?;
    let scheme = ScalingScheme::linear(rope.num_pairs(), dims.pi_factor)?;
    if dims.pi_factor < 1.0 {
        return Err(Error::config(format!("PI factor must be >= 1, got {}", dims.pi_factor)));
    }
    if dims.tokens_per_length == 0 {
        return Err(Error::config("tokens_per_length must be positive"));
    }
    let mut lengths = dims.lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.is_empty() || lengths[0] == 0 {
        return Err(Error::config("need at least one positive context length"));
    }

    let n_out = if outliers.is_empty() { 0 } else { outliers.channels };
    if n_out >= dims.d_model {
        return Err(Error::config(format!(
            "{n_out} outlier channels leave no regular channels in d_model {}",
            dims.d_model
        )));
    }
    if !outliers.is_empty() {
        if !(outliers.magnitude > 0.0 && outliers.growth >= 0.0 && outliers.weight_gain > 0.0) {
            return Err(Error::config("outlier magnitude, growth and gain must be positive"));
        }
        if let Some(&b) = outliers.bands.iter().find(|&&b| b >= outliers.num_bands) {
            return Err(Error::config(format!(
                "outlier band {b} out of range for {} bands",
                outliers.num_bands
            )));
        }
    }
    let out_cols = dims.d_model - n_out..dims.d_model;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = model.proj_rows();
    let std = 1.0 / (dims.d_model as f64).sqrt();
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut target = vec![false; rows];
    if n_out > 0 {
        let part = partition_log_freq(&pair_frequencies(&rope), outliers.num_bands)?;
        for &b in &outliers.bands {
            for r in part.band_rows(b, dims.pairing, dims.head_dim, rows)? {
                target[r] = true;
            }
        }
    }
    let mut wq = Matrix::zeros(rows, dims.d_model);
    let mut wk = Matrix::zeros(rows, dims.d_model);
    for r in 0..rows {
        for c in 0..dims.d_model {
            let (q, k) = (gauss(&mut rng), gauss(&mut rng));
            let outlier_col = out_cols.contains(&c);
            let qv = match (outlier_col, target[r]) {
                (false, _) => q * std,
                (true, true) => q * std * outliers.weight_gain,
                (true, false) => 0.0,
            };
            let kv = if outlier_col { 0.0 } else { k * std };
            wq.set(r, c, f32_round(qv));
            wk.set(r, c, f32_round(kv));
        }
    }

    let heavy = StudentT::new(3.0).map_err(|e| Error::config(e.to_string()))?;
    let l0 = dims.train_window as f64;
    let mut contexts = Vec::with_capacity(lengths.len());
    for &length in &lengths {
        let n_seq = dims.tokens_per_length.div_ceil(length);
        let sequences = (0..n_seq)
            .map(|_| {
                Matrix::from_fn(length, dims.d_model, |t, c| {
                    let v = if out_cols.contains(&c) {
                        let grow = 1.0 + outliers.growth * ((t as f64 - l0).max(0.0) / l0);
                        outliers.magnitude * grow * heavy.sample(&mut rng)
                    } else {
                        gauss(&mut rng)
                    };
                    f32_round(v)
                })
            })
            .collect();
        contexts.push(Context::new(length, sequences)?);
    }

    let bundle = ModelBundle {
        dims: model,
        wq,
        wk,
        rope,
        scheme,
        quant: dims.quant,
        contexts,
    };
    bundle.validate()?;
    Ok(bundle)
}
