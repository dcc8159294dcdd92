//! Line-delimited JSON messages exchanged with an external evaluator.
//!
//! Both sides open with `{"type":"hello","version":1}`. Each `eval` request
//! is answered by exactly one `ok` or `error` line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::Pairing;
use crate::search::{ScaleMode, ScalePlan};

pub const PROTOCOL_VERSION: u32 = 1;

/// The plan fields a backend needs to rescale its own projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePlan {
    pub mode: ScaleMode,
    pub scales: Vec<f64>,
    /// Half-open pair ranges `[lo, hi)`.
    pub bands: Vec<[usize; 2]>,
    pub pairing: Pairing,
}

impl From<&ScalePlan> for WirePlan {
    fn from(plan: &ScalePlan) -> Self {
        Self {
            mode: plan.mode,
            scales: plan.scales.clone(),
            bands: plan
                .partition
                .ranges()
                .iter()
                .map(|r| [r.start, r.end])
                .collect(),
            pairing: plan.pairing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        version: u32,
    },
    Eval {
        plan: WirePlan,
        lengths: Vec<usize>,
        window: usize,
    },
    Ok {
        /// Perplexity keyed by decimal length.
        ppl: BTreeMap<String, f64>,
    },
    Error {
        message: String,
    },
}

impl Message {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol messages always serialize")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| Error::protocol(format!("unparseable message: {e}"), line))
    }
}

/// Converts an `ok` reply's string keys into lengths.
pub fn parse_ppl(ppl: &BTreeMap<String, f64>, line: &str) -> Result<BTreeMap<usize, f64>> {
    ppl.iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|len| (len, *v))
                .map_err(|_| Error::protocol(format!("perplexity key {k:?} is not a length"), line))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::partition_log_freq;

    fn samples() -> Vec<Message> {
        let part = partition_log_freq(&[1.0, 0.1, 0.01, 0.001], 2).unwrap();
        let plan = ScalePlan::identity(part, Pairing::Interleaved, ScaleMode::Symmetric)
            .with_scales(vec![0.8, 1.2599210498948732]);
        let mut ppl = BTreeMap::new();
        ppl.insert("2048".to_string(), 4.44);
        ppl.insert("512".to_string(), 1e-300);
        vec![
            Message::Hello { version: 1 },
            Message::Eval {
                plan: WirePlan::from(&plan),
                lengths: vec![512, 2048],
                window: 256,
            },
            Message::Ok { ppl },
            Message::Error {
                message: "out of memory \"quoted\"\n".into(),
            },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for m in samples() {
            let line = m.to_line();
            assert!(!line.contains('\n'));
            assert_eq!(Message::parse(&line).unwrap(), m);
        }
    }

    #[test]
    fn wire_shapes() {
        assert_eq!(Message::Hello { version: 1 }.to_line(), r#"{"type":"hello","version":1}"#);
        let eval = samples()[1].to_line();
        assert!(eval.starts_with(r#"{"type":"eval","plan":{"mode":"symmetric","scales":[0.8,1.2599210498948732],"bands":[[0,2],[2,4]],"pairing":"interleaved"}"#), "{eval}");
        let ok = Message::parse(r#"{"type":"ok","ppl":{"2048":4.44}}"#).unwrap();
        assert!(matches!(ok, Message::Ok { .. }));
    }

    #[test]
    fn malformed_lines_keep_raw_text() {
        for bad in ["not json", r#"{"type":"bogus"}"#, r#"{"type":"ok"}"#, r#"{"type":"hello","version":1,"x":2}"#] {
            match Message::parse(bad) {
                Err(Error::Protocol { line, .. }) => assert_eq!(line, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
        let mut ppl = BTreeMap::new();
        ppl.insert("long".to_string(), 1.0);
        assert!(parse_ppl(&ppl, "raw").is_err());
    }
}
