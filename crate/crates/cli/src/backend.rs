//! A trivial evaluator backend that answers every request with a fixed
//! perplexity. Handy for smoke tests of the external protocol.

use std::io::{BufRead, Write};

use qroar_core::evaluator::protocol::{Message, PROTOCOL_VERSION};
use qroar_core::{Error, Result};

pub fn echo(ppl: f64) -> Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match Message::parse(&line) {
            Ok(Message::Hello { .. }) => Message::Hello {
                version: PROTOCOL_VERSION,
            },
            Ok(Message::Eval { lengths, .. }) => Message::Ok {
                ppl: lengths.iter().map(|l| (l.to_string(), ppl)).collect(),
            },
            Ok(other) => Message::Error {
                message: format!("unexpected message {other:?}"),
            },
            Err(e) => Message::Error {
                message: e.to_string(),
            },
        };
        writeln!(out, "{}", reply.to_line()).map_err(|e| Error::Transport(e.to_string()))?;
        out.flush().map_err(|e| Error::Transport(e.to_string()))?;
    }
    Ok(())
}
