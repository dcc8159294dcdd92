use std::time::Duration;

use qroar_core::bands::partition_log_freq;
use qroar_core::error::{Error, ErrorClass};
use qroar_core::evaluator::protocol::{Message, WirePlan};
use qroar_core::evaluator::ExternalEvaluator;
use qroar_core::search::{LengthWeight, Objective, ScaleMode, ScalePlan};
use qroar_core::Pairing;

/// A shell backend that answers the handshake and replies `reply` to every
/// eval request.
fn backend(reply: &str) -> String {
    format!(
        r#"while IFS= read -r line; do case "$line" in *'"hello"'*) echo '{{"type":"hello","version":1}}';; *'"eval"'*) echo '{reply}';; esac; done"#
    )
}

fn weights(pairs: &[(usize, f64)]) -> Vec<LengthWeight> {
    pairs
        .iter()
        .map(|&(length, weight)| LengthWeight { length, weight })
        .collect()
}

fn plan() -> ScalePlan {
    let part = partition_log_freq(&[1.0, 0.1, 0.01, 0.001], 2).unwrap();
    ScalePlan::identity(part, Pairing::HalfSplit, ScaleMode::Symmetric)
}

fn spawn(reply: &str, lengths: &[(usize, f64)]) -> qroar_core::Result<ExternalEvaluator> {
    ExternalEvaluator::spawn(&backend(reply), weights(lengths), 256, Duration::from_secs(10))
}

#[test]
fn fixed_perplexity_is_the_objective() {
    let ev = spawn(r#"{"type":"ok","ppl":{"512":7.0,"2048":7.0}}"#, &[(512, 1.0), (2048, 3.0)]).unwrap();
    assert_eq!(ev.evaluate(&plan()).unwrap(), 7.0);
    // Several requests over the same process.
    assert_eq!(ev.evaluate(&plan().with_scales(vec![0.5, 2.0])).unwrap(), 7.0);
    assert!(ev.describe().starts_with("external_ppl("));
}

#[test]
fn weighted_mean_of_lengths() {
    let ev = spawn(r#"{"type":"ok","ppl":{"512":4.0,"2048":8.0}}"#, &[(512, 0.25), (2048, 0.75)]).unwrap();
    assert_eq!(ev.evaluate(&plan()).unwrap(), 7.0);
    let per = ev.evaluate_lengths(&plan()).unwrap();
    assert_eq!(per[&512], 4.0);
}

#[test]
fn malformed_reply_keeps_raw_line() {
    let ev = spawn("this is not json", &[(512, 1.0)]).unwrap();
    match ev.evaluate(&plan()) {
        Err(Error::Protocol { line, .. }) => assert_eq!(line, "this is not json"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn backend_error_message_surfaces() {
    let ev = spawn(r#"{"type":"error","message":"out of memory"}"#, &[(512, 1.0)]).unwrap();
    let err = ev.evaluate(&plan()).unwrap_err();
    assert!(matches!(&err, Error::Backend(m) if m == "out of memory"));
    assert_eq!(err.class(), ErrorClass::Backend);
}

#[test]
fn missing_or_bad_perplexities_rejected() {
    let ev = spawn(r#"{"type":"ok","ppl":{"512":4.0}}"#, &[(512, 1.0), (2048, 1.0)]).unwrap();
    assert!(matches!(ev.evaluate(&plan()), Err(Error::Protocol { .. })));
    let ev = spawn(r#"{"type":"ok","ppl":{"512":-1.0}}"#, &[(512, 1.0)]).unwrap();
    assert!(matches!(ev.evaluate(&plan()), Err(Error::NonFinite(_))));
    let ev = spawn(r#"{"type":"hello","version":1}"#, &[(512, 1.0)]).unwrap();
    assert!(matches!(ev.evaluate(&plan()), Err(Error::Protocol { .. })));
}

#[test]
fn handshake_failures() {
    let wrong = r#"read -r line; echo '{"type":"hello","version":2}'; cat >/dev/null"#;
    let err = ExternalEvaluator::spawn(wrong, weights(&[(512, 1.0)]), 256, Duration::from_secs(10));
    assert!(matches!(err, Err(Error::VersionMismatch { found: 2, expected: 1 })));

    let silent = "exit 0";
    let err = ExternalEvaluator::spawn(silent, weights(&[(512, 1.0)]), 256, Duration::from_secs(10));
    assert!(matches!(err, Err(Error::Transport(_))));
}

#[test]
fn slow_backend_times_out() {
    let slow = r#"read -r line; echo '{"type":"hello","version":1}'; sleep 5"#;
    let ev = ExternalEvaluator::spawn(slow, weights(&[(512, 1.0)]), 256, Duration::from_millis(200)).unwrap();
    let err = ev.evaluate(&plan()).unwrap_err();
    assert!(matches!(&err, Error::Transport(m) if m.contains("did not reply")), "{err}");
}

#[test]
fn backend_sees_the_wire_plan() {
    // Echo the request back inside an error message and parse it again.
    let echo = r#"while IFS= read -r line; do case "$line" in *'"hello"'*) echo '{"type":"hello","version":1}';; *) printf '{"type":"error","message":"%s"}\n' "$(printf '%s' "$line" | sed 's/"/\\"/g')";; esac; done"#;
    let ev = ExternalEvaluator::spawn(echo, weights(&[(512, 1.0)]), 128, Duration::from_secs(10)).unwrap();
    let p = plan().with_scales(vec![0.8, 1.25]);
    let Err(Error::Backend(raw)) = ev.evaluate(&p) else {
        panic!("expected echoed request");
    };
    let msg = Message::parse(&raw).unwrap();
    assert_eq!(
        msg,
        Message::Eval {
            plan: WirePlan::from(&p),
            lengths: vec![512],
            window: 128,
        }
    );
}
