//! Tables for `diagnose --stdout`, `report` and `apply`.

use std::fmt::Write as _;

use clap::ValueEnum;
use qroar_core::io::{self, PatchedTensor};
use qroar_core::search::{Projection, ScalePlan};
use qroar_core::{DiagnosticsReport, Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

pub const CSV_HEADER: &str = "band,omega_med,ip,tir_w,tir_a,g_min,g_max,g_star";

#[derive(Debug, Serialize)]
pub struct BandRow {
    pub band: usize,
    pub pairs: [usize; 2],
    pub omega_med: f64,
    pub ip: f64,
    pub tir_w: f64,
    pub tir_a: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub g_star: f64,
}

#[derive(Debug, Serialize)]
pub struct LengthRow {
    pub length: usize,
    pub identity: f64,
    pub plan: f64,
    pub delta: f64,
}

#[derive(Debug, Serialize)]
pub struct Table {
    pub report: DiagnosticsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<serde_json::Value>,
    pub bands: Vec<BandRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lengths: Vec<LengthRow>,
}

/// Band rows for `report`, rebanded onto the plan's partition when one is
/// given. Without a plan every band reads as the identity `g = 1`.
pub fn table(report: &DiagnosticsReport, plan: Option<&ScalePlan>) -> Result<Table> {
    let report = match plan {
        Some(p) if report.partition()? != p.partition => report.rebanded(&p.partition)?,
        _ => report.clone(),
    };
    let bands = report
        .bands
        .iter()
        .enumerate()
        .map(|(b, d)| {
            let (g_min, g_max, g_star) = match plan {
                Some(p) => {
                    let g = p.scales[b];
                    match p.windows.get(b) {
                        Some(w) => (w.min, w.max, g),
                        None => (g, g, g),
                    }
                }
                None => (1.0, 1.0, 1.0),
            };
            BandRow {
                band: d.band,
                pairs: d.pairs,
                omega_med: d.omega_med,
                ip: d.ip,
                tir_w: d.tir_w,
                tir_a: d.tir_a,
                g_min,
                g_max,
                g_star,
            }
        })
        .collect();
    let plan = plan
        .map(|p| {
            io::plan_to_json(p).and_then(|s| {
                serde_json::from_str(&s).map_err(|e| Error::Schema(e.to_string()))
            })
        })
        .transpose()?;
    Ok(Table {
        report,
        plan,
        bands,
        lengths: Vec::new(),
    })
}

pub fn render(t: &Table, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => {
            let mut s =
                serde_json::to_string_pretty(t).map_err(|e| Error::Schema(e.to_string()))?;
            s.push('\n');
            s
        }
        Format::Csv => csv(t),
        Format::Text => text(t),
    })
}

fn csv(t: &Table) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in &t.bands {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.band, r.omega_med, r.ip, r.tir_w, r.tir_a, r.g_min, r.g_max, r.g_star
        );
    }
    if !t.lengths.is_empty() {
        s.push_str("\nlength,identity,plan,delta\n");
        for l in &t.lengths {
            let _ = writeln!(s, "{},{},{},{}", l.length, l.identity, l.plan, l.delta);
        }
    }
    s
}

fn text(t: &Table) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "eps {}  displacement {}  pairing {:?}",
        t.report.eps, t.report.displacement, t.report.pairing
    );
    let _ = writeln!(
        s,
        "{:>4} {:>9} {:>11} {:>11} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "band", "pairs", "omega_med", "ip", "tir_w", "tir_a", "g_min", "g_max", "g*"
    );
    for r in &t.bands {
        let _ = writeln!(
            s,
            "{:>4} {:>9} {:>11.4e} {:>11.4e} {:>8.4} {:>8.4} {:>7.4} {:>7.4} {:>7.4}",
            r.band,
            format!("{}..{}", r.pairs[0], r.pairs[1]),
            r.omega_med,
            r.ip,
            r.tir_w,
            r.tir_a,
            r.g_min,
            r.g_max,
            r.g_star
        );
    }
    if !t.lengths.is_empty() {
        let _ = writeln!(s, "\n{:>7} {:>12} {:>12} {:>12}", "length", "identity", "plan", "delta");
        for l in &t.lengths {
            let _ = writeln!(
                s,
                "{:>7} {:>12.5e} {:>12.5e} {:>+12.4e}",
                l.length, l.identity, l.plan, l.delta
            );
        }
    }
    s
}

/// One line per (tensor, band): name, projection, band, pair range, factor.
pub fn patch_summary(patched: &[PatchedTensor], plan: &ScalePlan) -> String {
    let mut s = String::new();
    for p in patched {
        let proj = match p.projection {
            Projection::Query => "query",
            Projection::Key => "key",
        };
        for (b, (f, r)) in p.band_factors.iter().zip(plan.partition.ranges()).enumerate() {
            let _ = writeln!(
                s,
                "{}\t{proj}\tband {b}\tpairs {}..{}\tscale {f}",
                p.name, r.start, r.end
            );
        }
    }
    s
}
