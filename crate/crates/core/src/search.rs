//! Band-wise Q/K rescale search.
//!
//! Windows come from the band's frequency position (`γ_b`, tight for high
//! frequencies) and its weight tail inflation (`κ / TIR^W_b`, pulls inflated
//! bands below 1). Each window is sampled on a log grid that always contains
//! 1.0, and an [`Objective`] is minimized by coordinate sweeps or exhaustive
//! joint enumeration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bands::{partition_log_freq, BandPartition};
use crate::diagnostics::{self, DiagnosticsReport, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::evaluator::ModelBundle;
use crate::linalg::Matrix;
use crate::par;
use crate::rope::{pair_frequencies, Pairing, RopeConfig, ScalingScheme};

pub const WINDOW_RULE: &str =
    "center=clamp(kappa/tir_w, 1/gamma, gamma); window=[center/gamma, center*gamma] ∩ clamp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `W_Q ← g W_Q`, `W_K ← g W_K`.
    Shared,
    /// `W_Q ← g W_Q`, `W_K ← g⁻¹ W_K`; full-precision logits are unchanged.
    Symmetric,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Shared => "shared",
            ScaleMode::Symmetric => "symmetric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Coordinate,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

impl Window {
    pub fn contains(&self, g: f64) -> bool {
        self.min <= g && g <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthWeight {
    pub length: usize,
    pub weight: f64,
}

/// Weights proportional to length, normalized to sum to one.
pub fn length_weights(lengths: &[usize]) -> Vec<LengthWeight> {
    let total: f64 = lengths.iter().map(|&l| l as f64).sum();
    lengths
        .iter()
        .map(|&length| LengthWeight {
            length,
            weight: length as f64 / total,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub bands: usize,
    pub grid_points: usize,
    pub strategy: Strategy,
    pub eta: f64,
    pub kappa: f64,
    pub tau: f64,
    pub lengths: Vec<LengthWeight>,
    pub max_passes: usize,
    pub global_clamp: [f64; 2],
    pub joint_budget: u64,
    pub eps: f64,
    /// Lifts the `B ∈ {6, 8}` and `K ∈ [5, 9]` restrictions.
    #[serde(default)]
    pub allow_nonstandard: bool,
}

impl SearchConfig {
    /// Defaults with lengths `{L0/2, L0, 2L0, 4L0, 8L0}` weighted by length.
    pub fn for_train_window(train_window: usize) -> Self {
        let l0 = train_window;
        Self {
            bands: 8,
            grid_points: 7,
            strategy: Strategy::Coordinate,
            eta: 1e-4,
            kappa: 1.2,
            tau: 0.3,
            lengths: length_weights(&[l0 / 2, l0, 2 * l0, 4 * l0, 8 * l0]),
            max_passes: 3,
            global_clamp: [0.25, 4.0],
            joint_budget: 100_000,
            eps: DEFAULT_EPS,
            allow_nonstandard: false,
        }
    }

    pub fn validate(&self, train_window: usize) -> Result<()> {
        if !(1.0..=1.3).contains(&self.kappa) {
            return Err(Error::config(format!("kappa must be in [1.0, 1.3], got {}", self.kappa)));
        }
        if !(0.2..=0.5).contains(&self.tau) {
            return Err(Error::config(format!("tau must be in [0.2, 0.5], got {}", self.tau)));
        }
        if self.allow_nonstandard {
            if self.bands == 0 || self.grid_points == 0 {
                return Err(Error::config("bands and grid points must be positive"));
            }
        } else {
            if ![6, 8].contains(&self.bands) {
                return Err(Error::config(format!(
                    "band count must be 6 or 8 (got {}); pass allow_nonstandard to override",
                    self.bands
                )));
            }
            if !(5..=9).contains(&self.grid_points) {
                return Err(Error::config(format!(
                    "grid points must be in [5, 9] (got {}); pass allow_nonstandard to override",
                    self.grid_points
                )));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be a finite value >= 0, got {}", self.eta)));
        }
        if self.max_passes == 0 {
            return Err(Error::config("max_passes must be at least 1"));
        }
        let [lo, hi] = self.global_clamp;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::config(format!(
                "global clamp must satisfy 0 < floor <= 1 <= ceil, got [{lo}, {hi}]"
            )));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::config(format!("eps must be in (0, 1), got {}", self.eps)));
        }
        if self.lengths.is_empty() {
            return Err(Error::config("at least one evaluation length is required"));
        }
        if self.lengths.iter().any(|l| !(l.weight > 0.0 && l.weight.is_finite()) || l.length == 0) {
            return Err(Error::config("length weights must be positive"));
        }
        if !self.lengths.iter().any(|l| l.length > train_window) {
            return Err(Error::config(format!(
                "at least one evaluation length must exceed the training window {train_window}"
            )));
        }
        Ok(())
    }

    pub fn normalized_lengths(&self) -> Vec<LengthWeight> {
        let total: f64 = self.lengths.iter().map(|l| l.weight).sum();
        self.lengths
            .iter()
            .map(|l| LengthWeight {
                length: l.length,
                weight: l.weight / total,
            })
            .collect()
    }
}

/// RoPE settings recorded with a plan so it can be audited and re-applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRope {
    pub base: f64,
    pub head_dim: usize,
    pub train_window: usize,
    pub scheme: ScalingScheme,
}

impl PlanRope {
    pub fn new(config: &RopeConfig, scheme: &ScalingScheme) -> Self {
        Self {
            base: config.base,
            head_dim: config.head_dim,
            train_window: config.train_window,
            scheme: scheme.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub strategy: Strategy,
    pub kappa: f64,
    pub tau: f64,
    pub bands: usize,
    pub grid_points: usize,
    pub eta: f64,
    pub max_passes: usize,
    pub global_clamp: [f64; 2],
    pub eps: f64,
    pub lengths: Vec<LengthWeight>,
    pub window_rule: String,
    pub evaluator: String,
    pub objective_value: f64,
    pub identity_objective: f64,
    pub evaluations: usize,
    pub passes: usize,
    pub fallback_to_shared: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePlan {
    pub mode: ScaleMode,
    pub scales: Vec<f64>,
    pub partition: BandPartition,
    pub pairing: Pairing,
    pub rope: Option<PlanRope>,
    /// Per-band search windows; empty for hand-built plans.
    pub windows: Vec<Window>,
    pub provenance: Option<Provenance>,
}

impl ScalePlan {
    pub fn identity(partition: BandPartition, pairing: Pairing, mode: ScaleMode) -> Self {
        Self {
            mode,
            scales: vec![1.0; partition.num_bands()],
            partition,
            pairing,
            rope: None,
            windows: Vec::new(),
            provenance: None,
        }
    }

    pub fn with_scales(&self, scales: Vec<f64>) -> Self {
        Self {
            scales,
            ..self.clone()
        }
    }

    /// Same mode, every `g_b` replaced by `1 / g_b`.
    pub fn inverse(&self) -> Self {
        Self {
            scales: self.scales.iter().map(|g| 1.0 / g).collect(),
            windows: Vec::new(),
            provenance: None,
            ..self.clone()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scales.iter().all(|&g| g == 1.0)
    }

    pub fn head_dim(&self) -> usize {
        2 * self.partition.num_pairs()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != self.partition.num_bands() {
            return Err(Error::DimensionMismatch {
                what: "plan scales vs bands".into(),
                expected: self.partition.num_bands(),
                got: self.scales.len(),
            });
        }
        if let Some(g) = self.scales.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::Schema(format!("band scale must be positive and finite, got {g}")));
        }
        if !self.windows.is_empty() {
            if self.windows.len() != self.scales.len() {
                return Err(Error::Schema("one window per band required".into()));
            }
            for (b, (w, g)) in self.windows.iter().zip(&self.scales).enumerate() {
                if !w.contains(*g) {
                    return Err(Error::Schema(format!(
                        "band {b} scale {g} lies outside its window [{}, {}]",
                        w.min, w.max
                    )));
                }
            }
        }
        if let Some(rope) = &self.rope {
            if rope.head_dim != self.head_dim() {
                return Err(Error::Schema(format!(
                    "plan rope head_dim {} disagrees with {} band pairs",
                    rope.head_dim,
                    self.partition.num_pairs()
                )));
            }
        }
        Ok(())
    }

    /// Multiplier for every row of a projection with `rows` output rows.
    pub fn row_factors(&self, projection: Projection, rows: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let bands = self.partition.row_bands(self.pairing, self.head_dim(), rows)?;
        Ok(bands
            .into_iter()
            .map(|b| {
                let g = self.scales[b];
                match (projection, self.mode) {
                    (Projection::Key, ScaleMode::Symmetric) => 1.0 / g,
                    _ => g,
                }
            })
            .collect())
    }
}

/// Returns a row-rescaled copy of one projection.
pub fn scale_projection(weights: &Matrix, plan: &ScalePlan, projection: Projection) -> Result<Matrix> {
    let factors = plan.row_factors(projection, weights.rows())?;
    let mut out = weights.clone();
    for (r, f) in factors.into_iter().enumerate() {
        if f != 1.0 {
            out.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
    }
    Ok(out)
}

pub fn apply_scale_plan(wq: &Matrix, wk: &Matrix, plan: &ScalePlan) -> Result<(Matrix, Matrix)> {
    Ok((
        scale_projection(wq, plan, Projection::Query)?,
        scale_projection(wk, plan, Projection::Key)?,
    ))
}

/// `γ = 1 + τ / (1 + ln ratio)`.
pub fn gamma_bound(omega_ratio: f64, tau: f64) -> Result<f64> {
    if !(omega_ratio >= 1.0 && omega_ratio.is_finite()) {
        return Err(Error::config(format!("frequency ratio must be >= 1, got {omega_ratio}")));
    }
    if !(0.2..=0.5).contains(&tau) {
        return Err(Error::config(format!("tau must be in [0.2, 0.5], got {tau}")));
    }
    Ok(1.0 + tau / (1.0 + omega_ratio.ln()))
}

pub fn band_window(gamma: f64, tir_w: f64, kappa: f64, global_clamp: [f64; 2]) -> Result<Window> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gamma must be > 1, got {gamma}")));
    }
    if !(tir_w > 0.0 && tir_w.is_finite()) {
        return Err(Error::config(format!("TIR^W must be positive, got {tir_w}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::config(format!("kappa must be positive, got {kappa}")));
    }
    let [floor, ceil] = global_clamp;
    if !(floor > 0.0 && floor <= 1.0 && ceil >= 1.0) {
        return Err(Error::config(format!("invalid global clamp [{floor}, {ceil}]")));
    }
    let center = (kappa / tir_w).clamp(1.0 / gamma, gamma);
    // center/γ <= 1 <= center·γ holds exactly; keep it under rounding too.
    let lo = (center / gamma).min(1.0).max(floor);
    let hi = (center * gamma).max(1.0).min(ceil);
    Ok(Window { min: lo, max: hi })
}

/// `K` log-spaced candidates spanning the window. If 1.0 lies inside the
/// window the nearest candidate (in log distance) is replaced by exactly 1.0.
pub fn build_grid(window: Window, k: usize) -> Result<Vec<f64>> {
    let Window { min, max } = window;
    if !(min > 0.0 && min <= max && max.is_finite()) {
        return Err(Error::config(format!("invalid window [{min}, {max}]")));
    }
    if k == 0 || (k == 1 && min != max) || (k > 1 && min == max) {
        return Err(Error::config(format!(
            "grid of {k} points cannot span window [{min}, {max}]"
        )));
    }
    if k == 1 {
        return Ok(vec![min]);
    }
    let (a, b) = (min.ln(), max.ln());
    let mut grid: Vec<f64> = (0..k)
        .map(|i| {
            if i == 0 {
                min
            } else if i == k - 1 {
                max
            } else {
                (a + (b - a) * i as f64 / (k - 1) as f64).exp()
            }
        })
        .collect();
    if window.contains(1.0) && !grid.contains(&1.0) {
        let nearest = (0..k)
            .min_by(|&i, &j| grid[i].ln().abs().total_cmp(&grid[j].ln().abs()))
            .expect("k >= 2");
        grid[nearest] = 1.0;
    }
    Ok(grid)
}

/// Something that scores a plan; lower is better.
pub trait Objective: Sync {
    fn evaluate(&self, plan: &ScalePlan) -> Result<f64>;

    fn describe(&self) -> String {
        "custom".to_string()
    }
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&ScalePlan) -> Result<f64> + Sync,
{
    fn evaluate(&self, plan: &ScalePlan) -> Result<f64> {
        (self.0)(plan)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pass: usize,
    /// Band being swept; `None` for joint enumeration.
    pub band: Option<usize>,
    pub scales: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub plan: ScalePlan,
    pub objective: f64,
    pub identity_objective: f64,
    pub evaluations: usize,
    pub passes: usize,
    pub trace: Vec<EvalRecord>,
    pub saw_non_finite: bool,
}

#[inline]
fn finite_or_inf(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        f64::INFINITY
    }
}

/// Ordering used for every argmin: objective, then closeness to 1.0 in log
/// space, then smaller scales.
fn candidate_cmp(a: (f64, &[f64]), b: (f64, &[f64])) -> std::cmp::Ordering {
    let dist = |s: &[f64]| s.iter().map(|g| g.ln().abs()).sum::<f64>();
    finite_or_inf(a.0)
        .total_cmp(&finite_or_inf(b.0))
        .then(dist(a.1).total_cmp(&dist(b.1)))
        .then_with(|| {
            a.1.iter()
                .zip(b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

fn check_grids(template: &ScalePlan, grids: &[Vec<f64>]) -> Result<()> {
    let b = template.partition.num_bands();
    if grids.len() != b {
        return Err(Error::DimensionMismatch {
            what: "grids vs bands".into(),
            expected: b,
            got: grids.len(),
        });
    }
    for (i, g) in grids.iter().enumerate() {
        if !g.contains(&1.0) {
            return Err(Error::config(format!("grid for band {i} does not contain 1.0")));
        }
        if g.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::config(format!("grid for band {i} has a non-positive value")));
        }
    }
    Ok(())
}

fn key(scales: &[f64]) -> Vec<u64> {
    scales.iter().map(|g| g.to_bits()).collect()
}

fn fmt_scales(scales: &[f64]) -> String {
    let parts: Vec<String> = scales.iter().map(|g| format!("{g:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Sweeps bands in `order`, fixing each to its best grid value with the
/// others held. Stops when a full pass gains less than `config.eta`, when a
/// pass changes nothing, or after `config.max_passes`.
pub fn coordinate_search(
    objective: &dyn Objective,
    template: &ScalePlan,
    grids: &[Vec<f64>],
    order: &[usize],
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    check_grids(template, grids)?;
    let b = grids.len();
    let mut sorted_order = order.to_vec();
    sorted_order.sort_unstable();
    if sorted_order != (0..b).collect::<Vec<_>>() {
        return Err(Error::config("band order must be a permutation of all bands"));
    }

    let mut current = vec![1.0; b];
    let mut memo: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut identity = None;
    let mut passes = 0;

    for pass in 1..=config.max_passes {
        passes = pass;
        let start = best;
        let mut changed = false;
        for &band in order {
            let trials: Vec<Vec<f64>> = grids[band]
                .iter()
                .map(|&g| {
                    let mut s = current.clone();
                    s[band] = g;
                    s
                })
                .collect();
            let fresh: Vec<&Vec<f64>> = trials.iter().filter(|s| !memo.contains_key(&key(s))).collect();
            let results = par::map(&fresh, |s| {
                objective.evaluate(&template.with_scales(s.to_vec()))
            });
            for (s, r) in fresh.iter().zip(results) {
                let value = r.map_err(|e| Error::Evaluation {
                    context: format!("pass {pass}, band {band}, candidate {}", s[band]),
                    source: Box::new(e),
                })?;
                log::debug!(
                    "pass={pass} band={band} candidate={:.6} objective={value:.9e}",
                    s[band]
                );
                trace.push(EvalRecord {
                    pass,
                    band: Some(band),
                    scales: s.to_vec(),
                    objective: value,
                });
                memo.insert(key(s), value);
            }
            if identity.is_none() {
                identity = memo.get(&key(&vec![1.0; b])).copied();
            }
            let winner = trials
                .iter()
                .map(|s| (memo[&key(s)], s.as_slice()))
                .min_by(|x, y| candidate_cmp(*x, *y))
                .expect("grids are non-empty");
            if winner.1[band] != current[band] {
                changed = true;
            }
            current = winner.1.to_vec();
            best = winner.0;
        }
        // The first pass is measured against the identity plan.
        let start = if pass == 1 {
            identity.unwrap_or(f64::INFINITY)
        } else {
            start
        };
        let (before, after) = (finite_or_inf(start), finite_or_inf(best));
        let gain = if before == after { 0.0 } else { before - after };
        if !changed || gain < config.eta {
            break;
        }
    }

    let identity_objective = identity.expect("identity evaluated in the first sweep");
    let saw_non_finite = trace.iter().any(|r| !r.objective.is_finite());
    Ok(SearchOutcome {
        plan: template.with_scales(current),
        objective: best,
        identity_objective,
        evaluations: trace.len(),
        passes,
        trace,
        saw_non_finite,
    })
}

/// Exhaustive argmin over the product of all grids.
pub fn joint_search(
    objective: &dyn Objective,
    template: &ScalePlan,
    grids: &[Vec<f64>],
    budget: u64,
) -> Result<SearchOutcome> {
    check_grids(template, grids)?;
    let required = grids
        .iter()
        .try_fold(1u128, |acc, g| acc.checked_mul(g.len() as u128))
        .unwrap_or(u128::MAX);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded {
            required,
            budget: budget as u128,
        });
    }
    let total = required as usize;
    let decode = |mut idx: usize| -> Vec<f64> {
        let mut s = vec![0.0; grids.len()];
        for (band, g) in grids.iter().enumerate().rev() {
            s[band] = g[idx % g.len()];
            idx /= g.len();
        }
        s
    };
    let values = par::try_map_range(total, |idx| {
        let s = decode(idx);
        objective
            .evaluate(&template.with_scales(s.clone()))
            .map_err(|e| Error::Evaluation {
                context: format!("joint candidate {}", fmt_scales(&s)),
                source: Box::new(e),
            })
    })?;
    let trace: Vec<EvalRecord> = values
        .into_iter()
        .enumerate()
        .map(|(idx, objective)| {
            let scales = decode(idx);
            log::debug!("pass=1 band=* candidate={} objective={objective:.9e}", fmt_scales(&scales));
            EvalRecord {
                pass: 1,
                band: None,
                scales,
                objective,
            }
        })
        .collect();
    let ones = vec![1.0; grids.len()];
    let identity_objective = trace
        .iter()
        .find(|r| r.scales == ones)
        .map(|r| r.objective)
        .expect("identity is on every grid");
    let best = trace
        .iter()
        .min_by(|x, y| candidate_cmp((x.objective, &x.scales), (y.objective, &y.scales)))
        .expect("non-empty product grid");
    Ok(SearchOutcome {
        plan: template.with_scales(best.scales.clone()),
        objective: best.objective,
        identity_objective,
        evaluations: trace.len(),
        passes: 1,
        saw_non_finite: trace.iter().any(|r| !r.objective.is_finite()),
        trace,
    })
}

/// Per-band windows from a diagnostics report that matches `partition`.
pub fn derive_windows(
    partition: &BandPartition,
    report: &DiagnosticsReport,
    config: &SearchConfig,
) -> Result<Vec<Window>> {
    if report.bands.len() != partition.num_bands() {
        return Err(Error::DimensionMismatch {
            what: "report bands vs partition".into(),
            expected: partition.num_bands(),
            got: report.bands.len(),
        });
    }
    (0..partition.num_bands())
        .map(|b| {
            let stats = partition.band_freq_stats(b)?;
            let gamma = gamma_bound(stats.ratio, config.tau)?;
            band_window(gamma, report.bands[b].tir_w, config.kappa, config.global_clamp)
        })
        .collect()
}

pub fn build_grids(windows: &[Window], k: usize) -> Result<Vec<Vec<f64>>> {
    windows.iter().map(|&w| build_grid(w, k)).collect()
}

#[derive(Debug, Clone)]
pub struct QroarOutcome {
    pub plan: ScalePlan,
    pub report: DiagnosticsReport,
    pub symmetric: SearchOutcome,
    /// Present when the symmetric result was unstable.
    pub shared: Option<SearchOutcome>,
}

fn search_mode(
    objective: &dyn Objective,
    template: &ScalePlan,
    grids: &[Vec<f64>],
    order: &[usize],
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    match config.strategy {
        Strategy::Coordinate => coordinate_search(objective, template, grids, order, config),
        Strategy::Joint => joint_search(objective, template, grids, config.joint_budget),
    }
}

fn unstable(outcome: &SearchOutcome) -> bool {
    outcome.saw_non_finite
        || !outcome.objective.is_finite()
        || outcome.objective > outcome.identity_objective
}

/// The whole calibration: partition, diagnostics (reused from `report` when
/// given), windows and grids, symmetric-mode search with a shared-mode
/// fallback, and provenance for the resulting plan.
pub fn run_qroar(
    rope: &RopeConfig,
    scheme: &ScalingScheme,
    report: &DiagnosticsReport,
    config: &SearchConfig,
    objective: &dyn Objective,
    seed: Option<u64>,
) -> Result<QroarOutcome> {
    config
        .validate(rope.train_window)
        .map_err(|e| e.in_stage("config"))?;
    let partition = partition_log_freq(&pair_frequencies(rope), config.bands)
        .map_err(|e| e.in_stage("partition"))?;
    let report = if report.bands.len() == partition.num_bands() {
        report.clone()
    } else {
        report.rebanded(&partition).map_err(|e| e.in_stage("diagnostics"))?
    };
    let windows = derive_windows(&partition, &report, config).map_err(|e| e.in_stage("windows"))?;
    let grids = build_grids(&windows, config.grid_points).map_err(|e| e.in_stage("windows"))?;
    let order = report.bands_by_pressure();

    let mut template = ScalePlan::identity(partition, rope.pairing, ScaleMode::Symmetric);
    template.rope = Some(PlanRope::new(rope, scheme));
    template.windows = windows;

    let symmetric = search_mode(objective, &template, &grids, &order, config)
        .map_err(|e| e.in_stage("search"))?;
    let (chosen, shared) = if unstable(&symmetric) {
        log::warn!("symmetric search unstable; retrying in shared mode");
        let mut shared_template = template.clone();
        shared_template.mode = ScaleMode::Shared;
        let shared = search_mode(objective, &shared_template, &grids, &order, config)
            .map_err(|e| e.in_stage("search"))?;
        (shared.clone(), Some(shared))
    } else {
        (symmetric.clone(), None)
    };

    let mut plan = chosen.plan.clone();
    plan.provenance = Some(Provenance {
        strategy: config.strategy,
        kappa: config.kappa,
        tau: config.tau,
        bands: config.bands,
        grid_points: config.grid_points,
        eta: config.eta,
        max_passes: config.max_passes,
        global_clamp: config.global_clamp,
        eps: config.eps,
        lengths: config.normalized_lengths(),
        window_rule: WINDOW_RULE.to_string(),
        evaluator: objective.describe(),
        objective_value: chosen.objective,
        identity_objective: chosen.identity_objective,
        evaluations: symmetric.evaluations + shared.as_ref().map_or(0, |s| s.evaluations),
        passes: chosen.passes,
        fallback_to_shared: shared.is_some(),
        seed,
    });
    plan.validate().map_err(|e| e.in_stage("serialize"))?;
    Ok(QroarOutcome {
        plan,
        report,
        symmetric,
        shared,
    })
}

/// [`run_qroar`] driven by a bundle; diagnostics are computed when absent.
pub fn run_qroar_on_bundle(
    bundle: &ModelBundle,
    report: Option<&DiagnosticsReport>,
    config: &SearchConfig,
    objective: &dyn Objective,
    seed: Option<u64>,
) -> Result<QroarOutcome> {
    let owned;
    let report = match report {
        Some(r) => r,
        None => {
            owned = diagnostics::diagnose_bundle(bundle, config.bands, config.eps)
                .map_err(|e| e.in_stage("diagnostics"))?;
            &owned
        }
    };
    run_qroar(&bundle.rope, &bundle.scheme, report, config, objective, seed)
}
