//! Tensor containers, plan and report JSON, bundle persistence and
//! checkpoint patching.
//!
//! Tensor files use the 8-byte little-endian header length + JSON header +
//! raw payload layout of the safetensors format, so real checkpoints can be
//! patched in place of the synthetic ones.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use glob::Pattern;
use half::f16;
use safetensors::tensor::{SafeTensorError, TensorView};
use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::bands::BandPartition;
use crate::diagnostics::DiagnosticsReport;
use crate::error::{Error, Result};
use crate::evaluator::{Context, ModelBundle, ModelDims};
use crate::linalg::Matrix;
use crate::quant::QuantSpec;
use crate::rope::{pair_frequencies, Pairing, RopeConfig, ScalingScheme};
use crate::search::{scale_projection, PlanRope, Projection, Provenance, ScaleMode, ScalePlan, Window};

pub const PLAN_VERSION: u32 = 1;
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_META_KEY: &str = "qroar.bundle";
pub const PLAN_META_KEY: &str = "qroar.plan";
pub const MODEL_FILE: &str = "model.safetensors";
pub const ACTIVATIONS_FILE: &str = "activations.safetensors";

pub const DEFAULT_QUERY_PATTERNS: &[&str] = &["*q_proj.weight", "*wq", "*wq.weight", "*query.weight"];
pub const DEFAULT_KEY_PATTERNS: &[&str] = &["*k_proj.weight", "*wk", "*wk.weight", "*key.weight"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F16,
}

/// A dense tensor held as f32 regardless of its on-disk width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                what: format!("tensor elements for shape {shape:?}"),
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_matrix(m: &Matrix, dtype: DType) -> Self {
        Self {
            dtype,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::new(r, c, self.data.iter().map(|&x| x as f64).collect()),
            s => Err(Error::Schema(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self.dtype {
            DType::F32 => self.data.iter().flat_map(|x| x.to_le_bytes()).collect(),
            DType::F16 => self
                .data
                .iter()
                .flat_map(|&x| f16::from_f32(x).to_le_bytes())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

struct RawView {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &RawView {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn map_st_error(e: SafeTensorError) -> Error {
    use SafeTensorError as E;
    match e {
        E::InvalidHeader(_)
        | E::InvalidHeaderDeserialization(_)
        | E::HeaderTooLarge
        | E::HeaderTooSmall
        | E::InvalidHeaderLength
        | E::JsonError(_) => Error::MalformedHeader(e.to_string()),
        E::InvalidOffset(_) | E::TensorInvalidInfo | E::ValidationOverflow | E::MisalignedSlice => {
            Error::InvalidOffsets(e.to_string())
        }
        E::MetadataIncompleteBuffer => Error::TruncatedPayload(e.to_string()),
        other => Error::Schema(other.to_string()),
    }
}

fn decode(view: &TensorView<'_>, name: &str) -> Result<Tensor> {
    let bytes = view.data();
    let (dtype, data) = match view.dtype() {
        Dtype::F32 => (
            DType::F32,
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        Dtype::F16 => (
            DType::F16,
            bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        ),
        other => {
            return Err(Error::Schema(format!(
                "tensor {name}: dtype {other:?} is not supported (f32 and f16 only)"
            )))
        }
    };
    Tensor::new(dtype, view.shape().to_vec(), data)
}

pub fn parse_tensors(bytes: &[u8]) -> Result<TensorFile> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(map_st_error)?;
    let st = SafeTensors::deserialize(bytes).map_err(map_st_error)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        tensors.insert(name.to_string(), decode(&view, name)?);
    }
    let metadata = meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    Ok(TensorFile { tensors, metadata })
}

pub fn tensors_to_bytes(file: &TensorFile) -> Result<Vec<u8>> {
    let views: Vec<(&String, RawView)> = file
        .tensors
        .iter()
        .map(|(name, t)| {
            let dtype = match t.dtype {
                DType::F32 => Dtype::F32,
                DType::F16 => Dtype::F16,
            };
            (
                name,
                RawView {
                    dtype,
                    shape: t.shape.clone(),
                    bytes: t.to_bytes(),
                },
            )
        })
        .collect();
    let metadata = (!file.metadata.is_empty()).then(|| {
        file.metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<HashMap<_, _>>()
    });
    safetensors::serialize(views.iter().map(|(n, v)| (n.as_str(), v)), metadata)
        .map_err(map_st_error)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensors(&bytes)
}

pub fn write_tensors(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensors_to_bytes(file)?).map_err(|e| Error::io(path, e))
}

/// On-disk form of a [`ScalePlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub version: u32,
    pub mode: ScaleMode,
    pub scales: Vec<f64>,
    pub bands: Vec<[usize; 2]>,
    pub pairing: Pairing,
    pub rope: PlanRope,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl PlanFile {
    pub fn from_plan(plan: &ScalePlan) -> Result<Self> {
        plan.validate()?;
        let rope = plan
            .rope
            .clone()
            .ok_or_else(|| Error::Schema("plan lacks RoPE settings and cannot be serialized".into()))?;
        Ok(Self {
            version: PLAN_VERSION,
            mode: plan.mode,
            scales: plan.scales.clone(),
            bands: plan.partition.ranges().iter().map(|r| [r.start, r.end]).collect(),
            pairing: plan.pairing,
            rope,
            windows: plan.windows.clone(),
            provenance: plan.provenance.clone(),
        })
    }

    pub fn into_plan(self) -> Result<ScalePlan> {
        let config = RopeConfig::new(
            self.rope.head_dim,
            self.rope.base,
            self.pairing,
            self.rope.train_window,
        )
        .map_err(|e| Error::Schema(format!("plan rope: {e}")))?;
        let partition = BandPartition::from_ranges(
            self.bands.iter().map(|&[lo, hi]| lo..hi).collect(),
            pair_frequencies(&config),
        )?;
        let plan = ScalePlan {
            mode: self.mode,
            scales: self.scales,
            partition,
            pairing: self.pairing,
            rope: Some(self.rope),
            windows: self.windows,
            provenance: self.provenance,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Checks the `version` field before the strict schema so old or future
/// files get a version error rather than a field error.
fn check_version(value: &serde_json::Value, expected: u32) -> Result<()> {
    let found = value
        .get("version")
        .ok_or_else(|| Error::Schema("missing `version` field".into()))?
        .as_u64()
        .ok_or_else(|| Error::Schema("`version` must be an unsigned integer".into()))?;
    if found != expected as u64 {
        return Err(Error::VersionMismatch {
            found: found.min(u32::MAX as u64) as u32,
            expected,
        });
    }
    Ok(())
}

fn parse_versioned<T: serde::de::DeserializeOwned>(text: &str, expected: u32) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid JSON: {e}")))?;
    check_version(&value, expected)?;
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

pub fn plan_to_json(plan: &ScalePlan) -> Result<String> {
    let file = PlanFile::from_plan(plan)?;
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn plan_from_json(text: &str) -> Result<ScalePlan> {
    parse_versioned::<PlanFile>(text, PLAN_VERSION)?.into_plan()
}

pub fn write_plan(plan: &ScalePlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, plan_to_json(plan)?).map_err(|e| Error::io(path, e))
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<ScalePlan> {
    let path = path.as_ref();
    plan_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn report_to_json(report: &DiagnosticsReport) -> Result<String> {
    report.validate()?;
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn report_from_json(text: &str) -> Result<DiagnosticsReport> {
    let report: DiagnosticsReport = parse_versioned(text, crate::diagnostics::REPORT_VERSION)?;
    report.validate()?;
    Ok(report)
}

pub fn write_report(report: &DiagnosticsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_to_json(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<DiagnosticsReport> {
    let path = path.as_ref();
    report_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Which tensors to rescale and whether to embed the plan in the output.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchOptions {
    pub query_patterns: Vec<String>,
    pub key_patterns: Vec<String>,
    pub embed_plan: bool,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            query_patterns: DEFAULT_QUERY_PATTERNS.iter().map(|s| s.to_string()).collect(),
            key_patterns: DEFAULT_KEY_PATTERNS.iter().map(|s| s.to_string()).collect(),
            embed_plan: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchedTensor {
    pub name: String,
    pub projection: Projection,
    pub rows: usize,
    /// Row multiplier per band.
    pub band_factors: Vec<f64>,
}

fn compile(patterns: &[String]) -> Result<Vec<Pattern>> {
    patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| Error::config(format!("bad pattern {p:?}: {e}"))))
        .collect()
}

/// Rescales matched query/key tensors in memory. Unmatched tensors are
/// carried over untouched.
pub fn patch_tensors(
    input: &TensorFile,
    plan: &ScalePlan,
    opts: &PatchOptions,
) -> Result<(TensorFile, Vec<PatchedTensor>)> {
    plan.validate()?;
    let q = compile(&opts.query_patterns)?;
    let k = compile(&opts.key_patterns)?;
    let mut out = input.clone();
    let mut patched = Vec::new();
    for (name, tensor) in &input.tensors {
        let is_q = q.iter().any(|p| p.matches(name));
        let is_k = k.iter().any(|p| p.matches(name));
        let projection = match (is_q, is_k) {
            (false, false) => continue,
            (true, true) => {
                return Err(Error::config(format!(
                    "tensor {name} matches both query and key patterns"
                )))
            }
            (true, false) => Projection::Query,
            (false, true) => Projection::Key,
        };
        let m = tensor
            .to_matrix()
            .map_err(|e| Error::Schema(format!("tensor {name}: {e}")))?;
        let scaled = scale_projection(&m, plan, projection)
            .map_err(|e| Error::Schema(format!("tensor {name}: {e}")))?;
        out.tensors
            .insert(name.clone(), Tensor::from_matrix(&scaled, tensor.dtype));
        let band_factors = plan
            .scales
            .iter()
            .map(|&g| match (projection, plan.mode) {
                (Projection::Key, ScaleMode::Symmetric) => 1.0 / g,
                _ => g,
            })
            .collect();
        patched.push(PatchedTensor {
            name: name.clone(),
            projection,
            rows: m.rows(),
            band_factors,
        });
    }
    if patched.is_empty() {
        let mut pats = opts.query_patterns.clone();
        pats.extend(opts.key_patterns.iter().cloned());
        return Err(Error::NoMatchingTensors(pats));
    }
    if opts.embed_plan {
        out.metadata.insert(PLAN_META_KEY.to_string(), plan_to_json(plan)?);
    }
    Ok((out, patched))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Writes a rescaled copy of `input` to `output`; the input is never touched.
pub fn patch_checkpoint(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    plan: &ScalePlan,
    opts: &PatchOptions,
) -> Result<Vec<PatchedTensor>> {
    let (input, output) = (input.as_ref(), output.as_ref());
    if input == output || same_file(input, output) {
        return Err(Error::config(format!(
            "output {} would overwrite the input checkpoint",
            output.display()
        )));
    }
    let file = read_tensors(input)?;
    let (patched, summary) = patch_tensors(&file, plan, opts)?;
    write_tensors(output, &patched)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    version: u32,
    dims: ModelDims,
    rope: RopeConfig,
    scheme: ScalingScheme,
    quant: Option<QuantSpec>,
    /// `(length, sequence count)` per context.
    contexts: Vec<[usize; 2]>,
}

fn ctx_name(length: usize, seq: usize) -> String {
    format!("ctx.{length}.{seq:04}")
}

/// Writes `model.safetensors` and `activations.safetensors` into `dir`.
pub fn save_bundle(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        version: BUNDLE_VERSION,
        dims: bundle.dims,
        rope: bundle.rope.clone(),
        scheme: bundle.scheme.clone(),
        quant: bundle.quant,
        contexts: bundle
            .contexts
            .iter()
            .map(|c| [c.length, c.sequences.len()])
            .collect(),
    };
    let mut model = TensorFile::default();
    model.tensors.insert("wq".into(), Tensor::from_matrix(&bundle.wq, DType::F32));
    model.tensors.insert("wk".into(), Tensor::from_matrix(&bundle.wk, DType::F32));
    model.metadata.insert(
        BUNDLE_META_KEY.into(),
        serde_json::to_string(&meta).map_err(|e| Error::Schema(e.to_string()))?,
    );
    let mut acts = TensorFile::default();
    for c in &bundle.contexts {
        for (i, s) in c.sequences.iter().enumerate() {
            acts.tensors
                .insert(ctx_name(c.length, i), Tensor::from_matrix(s, DType::F32));
        }
    }
    write_tensors(dir.join(MODEL_FILE), &model)?;
    write_tensors(dir.join(ACTIVATIONS_FILE), &acts)
}

pub fn bundle_paths(dir: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join(MODEL_FILE), dir.join(ACTIVATIONS_FILE))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let (model_path, acts_path) = bundle_paths(dir);
    let model = read_tensors(&model_path)?;
    let raw = model
        .metadata
        .get(BUNDLE_META_KEY)
        .ok_or_else(|| Error::Schema(format!("{} lacks bundle metadata", model_path.display())))?;
    let meta: BundleMeta = parse_versioned(raw, BUNDLE_VERSION)?;
    let get = |file: &TensorFile, name: &str| -> Result<Matrix> {
        file.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))?
            .to_matrix()
    };
    let acts = read_tensors(&acts_path).map_err(|e| match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingCache(meta.contexts.first().map_or(0, |c| c[0]))
        }
        other => other,
    })?;
    let contexts = meta
        .contexts
        .iter()
        .map(|&[length, n]| {
            let seqs = (0..n)
                .map(|i| {
                    acts.tensors
                        .get(&ctx_name(length, i))
                        .ok_or(Error::MissingCache(length))?
                        .to_matrix()
                })
                .collect::<Result<Vec<_>>>()?;
            Context::new(length, seqs)
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = ModelBundle {
        dims: meta.dims,
        wq: get(&model, "wq")?,
        wk: get(&model, "wk")?,
        rope: meta.rope,
        scheme: meta.scheme,
        quant: meta.quant,
        contexts,
    };
    bundle.validate()?;
    Ok(bundle)
}
