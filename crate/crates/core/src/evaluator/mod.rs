//! Search objectives: a built-in logit-distortion surrogate over cached
//! hidden states, and a line-delimited JSON protocol for external backends.

mod external;
pub mod protocol;
mod synth;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use external::{ExternalEvaluator, DEFAULT_TIMEOUT};
pub use synth::{synth_model, OutlierSpec, SynthDims};

use crate::diagnostics::{ActivationCache, CacheMeta, PairSamples};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::quant::{fake_quant, QuantSpec};
use crate::rope::{Rope, RopeConfig, ScalingScheme};
use crate::search::{apply_scale_plan, LengthWeight, Objective, ScalePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::config("d_model and heads must be positive"));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be a positive even number, got {}",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Output rows of a stacked Q or K projection.
    pub fn proj_rows(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Hidden states for one context length, as independent sequences of
/// exactly `length` tokens. Token `t` of a sequence sits at position `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub length: usize,
    pub sequences: Vec<Matrix>,
}

impl Context {
    pub fn new(length: usize, sequences: Vec<Matrix>) -> Result<Self> {
        if length == 0 || sequences.is_empty() {
            return Err(Error::EmptyInput("context sequences"));
        }
        let width = sequences[0].cols();
        for s in &sequences {
            if s.rows() != length {
                return Err(Error::DimensionMismatch {
                    what: format!("tokens in a length-{length} sequence"),
                    expected: length,
                    got: s.rows(),
                });
            }
            if s.cols() != width {
                return Err(Error::DimensionMismatch {
                    what: "hidden width across sequences".into(),
                    expected: width,
                    got: s.cols(),
                });
            }
        }
        Ok(Self { length, sequences })
    }

    pub fn tokens(&self) -> usize {
        self.length * self.sequences.len()
    }
}

/// Everything the search manipulates: one attention layer's projections,
/// its RoPE setup, the weight quantizer and cached hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub wq: Matrix,
    pub wk: Matrix,
    pub rope: RopeConfig,
    pub scheme: ScalingScheme,
    /// `None` disables quantization (full-precision passthrough).
    pub quant: Option<QuantSpec>,
    /// Sorted by ascending length, one entry per length.
    pub contexts: Vec<Context>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.rope.validate()?;
        self.scheme.validate_for(&self.rope)?;
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        if self.rope.head_dim != self.dims.head_dim {
            return Err(Error::DimensionMismatch {
                what: "rope head_dim vs model head_dim".into(),
                expected: self.dims.head_dim,
                got: self.rope.head_dim,
            });
        }
        for (what, w) in [("W_Q", &self.wq), ("W_K", &self.wk)] {
            if w.rows() != self.dims.proj_rows() || w.cols() != self.dims.d_model {
                return Err(Error::DimensionMismatch {
                    what: format!("{what} shape ({}x{})", w.rows(), w.cols()),
                    expected: self.dims.proj_rows() * self.dims.d_model,
                    got: w.rows() * w.cols(),
                });
            }
        }
        if self.contexts.is_empty() {
            return Err(Error::EmptyInput("bundle contexts"));
        }
        if self.contexts.windows(2).any(|w| w[0].length >= w[1].length) {
            return Err(Error::Schema("contexts must have distinct ascending lengths".into()));
        }
        for c in &self.contexts {
            if c.sequences[0].cols() != self.dims.d_model {
                return Err(Error::DimensionMismatch {
                    what: format!("hidden width at length {}", c.length),
                    expected: self.dims.d_model,
                    got: c.sequences[0].cols(),
                });
            }
        }
        Ok(())
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.contexts.iter().map(|c| c.length).collect()
    }

    pub fn context(&self, length: usize) -> Result<&Context> {
        self.contexts
            .iter()
            .find(|c| c.length == length)
            .ok_or(Error::MissingCache(length))
    }

    /// Longest cached context that fits the training window.
    pub fn short_context(&self) -> Result<&Context> {
        self.contexts
            .iter()
            .rev()
            .find(|c| c.length <= self.rope.train_window)
            .ok_or_else(|| {
                Error::config(format!(
                    "no cached context within the training window {}",
                    self.rope.train_window
                ))
            })
    }

    /// Longest cached context; must exceed the training window.
    pub fn long_context(&self) -> Result<&Context> {
        let c = self.contexts.last().ok_or(Error::EmptyInput("bundle contexts"))?;
        if c.length <= self.rope.train_window {
            return Err(Error::config(format!(
                "no cached context longer than the training window {}",
                self.rope.train_window
            )));
        }
        Ok(c)
    }

    /// Per-head query vectors (pre-rotation) for every token of a context.
    fn query_samples(&self, ctx: &Context) -> Result<PairSamples> {
        let d = self.dims.head_dim;
        let mut rows = Vec::with_capacity(ctx.tokens() * self.dims.heads);
        let mut positions = Vec::with_capacity(rows.capacity());
        for seq in &ctx.sequences {
            for (t, h) in seq.row_iter().enumerate() {
                let q = self.wq.matvec(h);
                for head in q.chunks(d) {
                    rows.push(head.to_vec());
                    positions.push(t as u64);
                }
            }
        }
        PairSamples::new(Matrix::from_rows(&rows)?, positions)
    }

    /// Short/long cache pair used by the diagnostics.
    pub fn activation_cache(&self) -> Result<ActivationCache> {
        self.validate()?;
        let short = self.short_context()?;
        let long = self.long_context()?;
        let stack = |c: &Context| {
            let rows: Vec<Vec<f64>> = c
                .sequences
                .iter()
                .flat_map(|s| s.row_iter().map(<[f64]>::to_vec))
                .collect();
            Matrix::from_rows(&rows)
        };
        ActivationCache::new(
            stack(short)?,
            stack(long)?,
            self.query_samples(short)?,
            self.query_samples(long)?,
            CacheMeta {
                short_length: short.length,
                long_length: long.length,
                scheme_id: self.scheme.id(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    LogitMse,
    ExternalPpl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub lengths: Vec<LengthWeight>,
    pub kind: ObjectiveKind,
    pub samples_per_length: usize,
    /// Sliding-window size forwarded to external backends.
    pub window: usize,
    pub seed: u64,
}

impl ObjectiveSpec {
    pub fn logit_mse(lengths: Vec<LengthWeight>, seed: u64) -> Self {
        Self {
            lengths,
            kind: ObjectiveKind::LogitMse,
            samples_per_length: 4096,
            window: 256,
            seed,
        }
    }

    /// Lengths with weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<Vec<LengthWeight>> {
        if self.lengths.is_empty() {
            return Err(Error::EmptyInput("objective lengths"));
        }
        if self
            .lengths
            .iter()
            .any(|l| !(l.weight > 0.0 && l.weight.is_finite()) || l.length == 0)
        {
            return Err(Error::config("objective weights must be positive and finite"));
        }
        let total: f64 = self.lengths.iter().map(|l| l.weight).sum();
        Ok(self
            .lengths
            .iter()
            .map(|l| LengthWeight {
                length: l.length,
                weight: l.weight / total,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct SamplePair {
    seq: usize,
    m: usize,
    n: usize,
}

struct LengthSamples {
    length: usize,
    weight: f64,
    pairs: Vec<SamplePair>,
    /// `heads` logits per pair, row-major.
    reference: Vec<f64>,
    variance: f64,
}

/// Displacements stratified by decade: `[0,1)`, `[1,10)`, `[10,100)`, ...
/// up to `length - 1`, with samples split evenly across decades.
fn sample_pairs(ctx: &Context, count: usize, rng: &mut ChaCha8Rng) -> Vec<SamplePair> {
    let max_d = ctx.length - 1;
    let mut strata = vec![(0usize, 0usize)];
    let mut lo = 1;
    while lo <= max_d {
        let hi = (lo * 10 - 1).min(max_d);
        strata.push((lo, hi));
        lo *= 10;
    }
    (0..count)
        .map(|j| {
            let (lo, hi) = strata[j % strata.len()];
            let d = rng.random_range(lo..=hi);
            let m = rng.random_range(d..=max_d);
            let seq = rng.random_range(0..ctx.sequences.len());
            SamplePair { seq, m, n: m - d }
        })
        .collect()
}

/// Normalized logit-MSE between full-precision attention logits and those of
/// the rescaled, fake-quantized projections. Lower is better; identity plans
/// on an unquantized bundle score zero.
pub struct LogitMse<'a> {
    bundle: &'a ModelBundle,
    rope: Rope,
    lengths: Vec<LengthSamples>,
    seed: u64,
}

impl<'a> LogitMse<'a> {
    pub fn new(bundle: &'a ModelBundle, spec: &ObjectiveSpec) -> Result<Self> {
        bundle.validate()?;
        if spec.samples_per_length == 0 {
            return Err(Error::config("samples_per_length must be positive"));
        }
        let rope = Rope::new(&bundle.rope, &bundle.scheme)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut lengths = Vec::new();
        for lw in spec.normalized()? {
            let ctx = bundle.context(lw.length)?;
            let pairs = sample_pairs(ctx, spec.samples_per_length, &mut rng);
            let reference = logits(bundle, &rope, &bundle.wq, &bundle.wk, ctx, &pairs);
            let n = reference.len() as f64;
            let mean = reference.iter().sum::<f64>() / n;
            let variance = reference.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::config(format!(
                    "reference logits at length {} have zero variance",
                    lw.length
                )));
            }
            lengths.push(LengthSamples {
                length: lw.length,
                weight: lw.weight,
                pairs,
                reference,
                variance,
            });
        }
        Ok(Self {
            bundle,
            rope,
            lengths,
            seed: spec.seed,
        })
    }

    /// Full-precision logits for the sampled pairs at `length`.
    pub fn reference_logits(&self, length: usize) -> Option<&[f64]> {
        self.lengths
            .iter()
            .find(|l| l.length == length)
            .map(|l| l.reference.as_slice())
    }

    /// Projections the candidate logits are computed from.
    pub fn candidate_weights(&self, plan: &ScalePlan) -> Result<(Matrix, Matrix)> {
        let (wq, wk) = apply_scale_plan(&self.bundle.wq, &self.bundle.wk, plan)?;
        match &self.bundle.quant {
            Some(spec) => Ok((fake_quant(&wq, spec)?, fake_quant(&wk, spec)?)),
            None => Ok((wq, wk)),
        }
    }

    /// Unweighted normalized MSE per length, in the spec's length order.
    pub fn per_length(&self, plan: &ScalePlan) -> Result<Vec<(usize, f64)>> {
        let (wq, wk) = self.candidate_weights(plan)?;
        self.lengths
            .iter()
            .map(|ls| {
                let ctx = self.bundle.context(ls.length)?;
                let cand = logits(self.bundle, &self.rope, &wq, &wk, ctx, &ls.pairs);
                let mse = cand
                    .iter()
                    .zip(&ls.reference)
                    .map(|(c, r)| (c - r).powi(2))
                    .sum::<f64>()
                    / cand.len() as f64;
                Ok((ls.length, mse / ls.variance))
            })
            .collect()
    }
}

impl Objective for LogitMse<'_> {
    fn evaluate(&self, plan: &ScalePlan) -> Result<f64> {
        let per = self.per_length(plan)?;
        let loss = per
            .iter()
            .zip(&self.lengths)
            .map(|((_, l), ls)| ls.weight * l)
            .sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFinite("logit-MSE objective".into()));
        }
        Ok(loss)
    }

    fn describe(&self) -> String {
        format!("logit_mse(seed={})", self.seed)
    }
}

/// Rotated per-head dot products `<R_m W_Q h_m, R_n W_K h_n>`.
fn logits(
    bundle: &ModelBundle,
    rope: &Rope,
    wq: &Matrix,
    wk: &Matrix,
    ctx: &Context,
    pairs: &[SamplePair],
) -> Vec<f64> {
    let d = bundle.dims.head_dim;
    let mut out = Vec::with_capacity(pairs.len() * bundle.dims.heads);
    for p in pairs {
        let seq = &ctx.sequences[p.seq];
        let mut q = wq.matvec(seq.row(p.m));
        let mut k = wk.matvec(seq.row(p.n));
        for (qh, kh) in q.chunks_mut(d).zip(k.chunks_mut(d)) {
            rope.rotate_in_place(qh, p.m as u64);
            rope.rotate_in_place(kh, p.n as u64);
            out.push(dot(qh, kh));
        }
    }
    out
}

/// Combines per-length perplexities with normalized weights.
pub fn combine_ppl(ppl: &BTreeMap<usize, f64>, lengths: &[LengthWeight]) -> Result<f64> {
    let total: f64 = lengths.iter().map(|l| l.weight).sum();
    let mut acc = 0.0;
    for l in lengths {
        let v = *ppl.get(&l.length).ok_or(Error::MissingCache(l.length))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonFinite(format!("perplexity at length {}", l.length)));
        }
        acc += l.weight / total * v;
    }
    Ok(acc)
}
