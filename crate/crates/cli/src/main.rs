//! `qroar`: synthesize bundles, diagnose, search, apply and report.
//!
//! Every subcommand reads and writes files so each stage can be scripted on
//! its own. Logs go to stderr; data goes to files, or stdout with `--stdout`.
//! Exit codes: 0 success, 1 validation, 2 I/O, 3 backend/protocol.

mod backend;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qroar_core::evaluator::{
    synth_model, ExternalEvaluator, LogitMse, ObjectiveKind, ObjectiveSpec, OutlierSpec, SynthDims,
};
use qroar_core::io::{self, PatchOptions};
use qroar_core::search::{length_weights, LengthWeight, Objective, SearchConfig, Strategy};
use qroar_core::{diagnose_bundle, ErrorClass, Granularity, Pairing, QuantSpec};

use crate::render::Format;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] qroar_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("searched plan objective {plan} is worse than the identity objective {identity}")]
    Regressed { plan: f64, identity: f64 },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Io => 2,
                ErrorClass::Backend => 3,
            },
            CliError::Usage(_) | CliError::Regressed { .. } => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qroar", version, about = "Band-wise RoPE rescaling for quantized, position-interpolated attention")]
struct Cli {
    /// Seed for synthesis and objective sampling.
    #[arg(long, global = true, env = "QROAR_SEED", default_value_t = 0)]
    seed: u64,

    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic model bundle (weights + cached hidden states).
    Synth(SynthArgs),
    /// Compute per-band IP, TIR^W and TIR^A.
    Diagnose(DiagnoseArgs),
    /// Search per-band scales and write a plan.
    Search(SearchArgs),
    /// Rescale query/key tensors of a checkpoint with a plan.
    Apply(ApplyArgs),
    /// Render a diagnostics report, optionally with a plan and objective deltas.
    Report(ReportArgs),
    /// Minimal evaluator backend replying a fixed perplexity (for testing).
    #[command(hide = true)]
    EchoBackend {
        #[arg(long, default_value_t = 7.0)]
        ppl: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairingArg {
    HalfSplit,
    Interleaved,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::HalfSplit => Pairing::HalfSplit,
            PairingArg::Interleaved => Pairing::Interleaved,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 256)]
    train_window: usize,
    /// Linear position-interpolation factor (1 disables interpolation).
    #[arg(long, default_value_t = 8.0)]
    pi_factor: f64,
    #[arg(long, default_value_t = 10000.0)]
    base: f64,
    #[arg(long, value_enum, default_value = "half-split")]
    pairing: PairingArg,
    #[arg(long, value_delimiter = ',', default_value = "128,512,2048")]
    lengths: Vec<usize>,
    /// Minimum cached tokens per length.
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    /// Weight bits for RTN quantization.
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// `per-tensor`, `per-channel` or `group:<size>`.
    #[arg(long, default_value = "per-tensor")]
    granularity: String,
    /// Disable weight quantization.
    #[arg(long)]
    no_quant: bool,
    /// Bands (under --outlier-num-bands) whose W_Q rows read outlier channels.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    outlier_bands: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    outlier_num_bands: usize,
    #[arg(long)]
    no_outliers: bool,
    #[arg(long, default_value_t = 2)]
    outlier_channels: usize,
    #[arg(long, default_value_t = 3.0)]
    outlier_magnitude: f64,
    #[arg(long, default_value_t = 1.0)]
    outlier_growth: f64,
    #[arg(long, default_value_t = 8.0)]
    outlier_gain: f64,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Bundle directory written by `synth`.
    #[arg(long)]
    bundle: PathBuf,
    /// Report JSON path.
    #[arg(long, required_unless_present = "stdout")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    bands: usize,
    /// Tail mass for the (1 - eps) quantile; must be in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Print the rendered report to stdout.
    #[arg(long)]
    stdout: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum EvaluatorArg {
    LogitMse,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Coordinate,
    Joint,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Existing diagnostics report; recomputed when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plan JSON path.
    #[arg(long, required_unless_present = "stdout")]
    out: Option<PathBuf>,
    #[arg(long)]
    stdout: bool,
    #[arg(long, default_value_t = 8)]
    bands: usize,
    /// Grid points per band.
    #[arg(long, default_value_t = 7)]
    grid: usize,
    #[arg(long, value_enum, default_value = "coordinate")]
    strategy: StrategyArg,
    /// Minimum objective gain per pass before stopping.
    #[arg(long, default_value_t = 1e-4)]
    eta: f64,
    #[arg(long, default_value_t = 1.2)]
    kappa: f64,
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    /// Evaluation lengths; defaults to every cached length.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    /// Length weights (normalized); defaults to proportional to length.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    max_passes: usize,
    #[arg(long, default_value_t = 0.25)]
    clamp_min: f64,
    #[arg(long, default_value_t = 4.0)]
    clamp_max: f64,
    #[arg(long, default_value_t = 100_000)]
    joint_budget: u64,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Allow band counts other than 6/8 and grids outside 5..=9.
    #[arg(long)]
    allow_nonstandard: bool,
    #[arg(long, value_enum, default_value = "logit-mse")]
    evaluator: EvaluatorArg,
    /// Backend command for `--evaluator external`, run through `sh -c`.
    #[arg(long)]
    backend: Option<String>,
    /// Sliding-window size sent to external backends.
    #[arg(long, default_value_t = 256)]
    window: usize,
    /// Position pairs sampled per length by the logit-MSE objective.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Per-request timeout for external backends, in seconds.
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Input checkpoint (tensor file).
    #[arg(long)]
    input: PathBuf,
    /// Output checkpoint; must differ from the input.
    #[arg(long)]
    out: PathBuf,
    /// Glob for query projections (repeatable); defaults to common names.
    #[arg(long = "query-pattern")]
    query_patterns: Vec<String>,
    /// Glob for key projections (repeatable); defaults to common names.
    #[arg(long = "key-pattern")]
    key_patterns: Vec<String>,
    /// Do not embed the plan in the output metadata.
    #[arg(long)]
    no_embed: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Bundle for identity-vs-plan objective deltas per length.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_granularity(s: &str) -> CliResult<Granularity> {
    match s {
        "per-tensor" => Ok(Granularity::PerTensor),
        "per-channel" => Ok(Granularity::PerOutputChannel),
        _ => s
            .strip_prefix("group:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(|group_size| Granularity::PerGroup { group_size })
            .ok_or_else(|| CliError::Usage(format!("unknown granularity {s:?}"))),
    }
}

fn write_output(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| qroar_core::Error::io(path, e).into())
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> CliResult {
    let quant = if a.no_quant {
        None
    } else {
        Some(QuantSpec::symmetric(a.bits, parse_granularity(&a.granularity)?)?)
    };
    let dims = SynthDims {
        d_model: a.d_model,
        heads: a.heads,
        head_dim: a.head_dim,
        train_window: a.train_window,
        pi_factor: a.pi_factor,
        base: a.base,
        pairing: a.pairing.into(),
        lengths: a.lengths.clone(),
        tokens_per_length: a.tokens,
        quant,
    };
    let outliers = OutlierSpec {
        bands: if a.no_outliers { Vec::new() } else { a.outlier_bands.clone() },
        num_bands: a.outlier_num_bands,
        channels: a.outlier_channels,
        magnitude: a.outlier_magnitude,
        growth: a.outlier_growth,
        weight_gain: a.outlier_gain,
    };
    let bundle = synth_model(seed, &dims, &outliers)?;
    io::save_bundle(&bundle, &a.out)?;
    log::info!(
        "wrote bundle to {} (lengths {:?}, seed {seed})",
        a.out.display(),
        bundle.lengths()
    );
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult {
    let bundle = io::load_bundle(&a.bundle)?;
    let report = diagnose_bundle(&bundle, a.bands, a.eps)?;
    if let Some(out) = &a.out {
        io::write_report(&report, out)?;
        log::info!("wrote diagnostics to {}", out.display());
    }
    if a.stdout {
        print!("{}", render::render(&render::table(&report, None)?, a.format)?);
    }
    Ok(())
}

fn search_lengths(a: &SearchArgs, cached: &[usize]) -> CliResult<Vec<LengthWeight>> {
    let lengths = if a.lengths.is_empty() { cached.to_vec() } else { a.lengths.clone() };
    if a.weights.is_empty() {
        return Ok(length_weights(&lengths));
    }
    if a.weights.len() != lengths.len() {
        return Err(CliError::Usage(format!(
            "{} weights given for {} lengths",
            a.weights.len(),
            lengths.len()
        )));
    }
    Ok(lengths
        .into_iter()
        .zip(&a.weights)
        .map(|(length, &weight)| LengthWeight { length, weight })
        .collect())
}

fn cmd_search(a: &SearchArgs, seed: u64) -> CliResult {
    let bundle = io::load_bundle(&a.bundle)?;
    let report = a.report.as_ref().map(io::read_report).transpose()?;
    let config = SearchConfig {
        bands: a.bands,
        grid_points: a.grid,
        strategy: match a.strategy {
            StrategyArg::Coordinate => Strategy::Coordinate,
            StrategyArg::Joint => Strategy::Joint,
        },
        eta: a.eta,
        kappa: a.kappa,
        tau: a.tau,
        lengths: search_lengths(a, &bundle.lengths())?,
        max_passes: a.max_passes,
        global_clamp: [a.clamp_min, a.clamp_max],
        joint_budget: a.joint_budget,
        eps: a.eps,
        allow_nonstandard: a.allow_nonstandard,
    };
    config.validate(bundle.rope.train_window)?;
    let spec = ObjectiveSpec {
        lengths: config.lengths.clone(),
        kind: match a.evaluator {
            EvaluatorArg::LogitMse => ObjectiveKind::LogitMse,
            EvaluatorArg::External => ObjectiveKind::ExternalPpl,
        },
        samples_per_length: a.samples,
        window: a.window,
        seed,
    };
    let objective: Box<dyn Objective + '_> = match spec.kind {
        ObjectiveKind::LogitMse => Box::new(LogitMse::new(&bundle, &spec)?),
        ObjectiveKind::ExternalPpl => {
            let cmd = a.backend.as_deref().ok_or_else(|| {
                CliError::Usage("--evaluator external requires --backend <command>".into())
            })?;
            Box::new(ExternalEvaluator::spawn(
                cmd,
                spec.normalized()?,
                spec.window,
                Duration::from_secs(a.timeout_secs),
            )?)
        }
    };
    let outcome = qroar_core::run_qroar_on_bundle(
        &bundle,
        report.as_ref(),
        &config,
        objective.as_ref(),
        Some(seed),
    )?;
    let prov = outcome.plan.provenance.as_ref().expect("searched plans carry provenance");
    log::info!(
        "{} plan: objective {:.6e} (identity {:.6e}), {} evaluations, {} passes",
        outcome.plan.mode.as_str(),
        prov.objective_value,
        prov.identity_objective,
        prov.evaluations,
        prov.passes
    );
    let text = io::plan_to_json(&outcome.plan)?;
    if let Some(out) = &a.out {
        write_output(out, &text)?;
        log::info!("wrote plan to {}", out.display());
    }
    if a.stdout {
        print!("{text}");
    }
    if prov.objective_value > prov.identity_objective {
        return Err(CliError::Regressed {
            plan: prov.objective_value,
            identity: prov.identity_objective,
        });
    }
    Ok(())
}

fn cmd_apply(a: &ApplyArgs) -> CliResult {
    let plan = io::read_plan(&a.plan)?;
    let defaults = PatchOptions::default();
    let opts = PatchOptions {
        query_patterns: if a.query_patterns.is_empty() {
            defaults.query_patterns
        } else {
            a.query_patterns.clone()
        },
        key_patterns: if a.key_patterns.is_empty() {
            defaults.key_patterns
        } else {
            a.key_patterns.clone()
        },
        embed_plan: !a.no_embed,
    };
    let summary = io::patch_checkpoint(&a.input, &a.out, &plan, &opts)?;
    print!("{}", render::patch_summary(&summary, &plan));
    log::info!("wrote {} ({} tensors rescaled)", a.out.display(), summary.len());
    Ok(())
}

fn cmd_report(a: &ReportArgs, seed: u64) -> CliResult {
    let report = io::read_report(&a.report)?;
    let plan = a.plan.as_ref().map(io::read_plan).transpose()?;
    let mut table = render::table(&report, plan.as_ref())?;
    if let Some(dir) = &a.bundle {
        let plan = plan
            .as_ref()
            .ok_or_else(|| CliError::Usage("--bundle needs --plan to compare against".into()))?;
        let bundle = io::load_bundle(dir)?;
        let lengths = plan
            .provenance
            .as_ref()
            .map(|p| p.lengths.clone())
            .unwrap_or_else(|| length_weights(&bundle.lengths()));
        let spec = ObjectiveSpec {
            samples_per_length: a.samples,
            ..ObjectiveSpec::logit_mse(lengths, seed)
        };
        let obj = LogitMse::new(&bundle, &spec)?;
        let ident = plan.with_scales(vec![1.0; plan.scales.len()]);
        table.lengths = obj
            .per_length(&ident)?
            .into_iter()
            .zip(obj.per_length(plan)?)
            .map(|((length, identity), (_, planned))| render::LengthRow {
                length,
                identity,
                plan: planned,
                delta: planned - identity,
            })
            .collect();
    }
    let text = render::render(&table, a.format)?;
    match &a.out {
        Some(path) => write_output(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Search(a) => cmd_search(a, cli.seed),
        Command::Apply(a) => cmd_apply(a),
        Command::Report(a) => cmd_report(a, cli.seed),
        Command::EchoBackend { ppl } => backend::echo(*ppl).map_err(CliError::from),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut shown = e.to_string();
            eprintln!("error: {shown}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let msg = s.to_string();
                if !shown.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                shown = msg;
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
