use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::combine_ppl;
use super::protocol::{parse_ppl, Message, WirePlan, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::search::{LengthWeight, Objective, ScalePlan};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

struct Channel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Channel {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let mut line = msg.to_line();
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Transport(format!("writing to backend: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<(Message, String)> {
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Transport(format!("reading from backend: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "backend did not reply within {:.1}s",
                    timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.try_wait().ok().flatten();
                return Err(Error::Transport(match status {
                    Some(s) => format!("backend exited ({s}) before replying"),
                    None => "backend closed its output".to_string(),
                }));
            }
        };
        Ok((Message::parse(&line)?, line))
    }
}

/// A backend process speaking the evaluator protocol on stdin/stdout.
/// Requests are serialized: one in flight per process.
pub struct ExternalEvaluator {
    command: String,
    lengths: Vec<LengthWeight>,
    window: usize,
    timeout: Duration,
    channel: Mutex<Channel>,
}

impl ExternalEvaluator {
    /// Starts `command` through `sh -c` and performs the hello handshake.
    pub fn spawn(
        command: &str,
        lengths: Vec<LengthWeight>,
        window: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::EmptyInput("external evaluator lengths"));
        }
        if lengths.iter().any(|l| !(l.weight > 0.0 && l.weight.is_finite())) {
            return Err(Error::config("length weights must be positive"));
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawning `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut channel = Channel {
            child,
            stdin,
            lines: rx,
        };
        channel.send(&Message::Hello {
            version: PROTOCOL_VERSION,
        })?;
        match channel.recv(timeout)? {
            (Message::Hello { version }, _) if version == PROTOCOL_VERSION => {}
            (Message::Hello { version }, _) => {
                return Err(Error::VersionMismatch {
                    found: version,
                    expected: PROTOCOL_VERSION,
                })
            }
            (_, line) => return Err(Error::protocol("expected hello handshake", line)),
        }
        log::debug!("external evaluator `{command}` ready");
        Ok(Self {
            command: command.to_string(),
            lengths,
            window,
            timeout,
            channel: Mutex::new(channel),
        })
    }

    /// Per-length perplexities for one plan.
    pub fn evaluate_lengths(&self, plan: &ScalePlan) -> Result<BTreeMap<usize, f64>> {
        let lengths: Vec<usize> = self.lengths.iter().map(|l| l.length).collect();
        let request = Message::Eval {
            plan: WirePlan::from(plan),
            lengths: lengths.clone(),
            window: self.window,
        };
        let mut channel = self
            .channel
            .lock()
            .map_err(|_| Error::Transport("evaluator channel poisoned".into()))?;
        channel.send(&request)?;
        let (reply, line) = channel.recv(self.timeout)?;
        match reply {
            Message::Ok { ppl } => {
                let ppl = parse_ppl(&ppl, &line)?;
                for l in &lengths {
                    match ppl.get(l) {
                        None => {
                            return Err(Error::protocol(
                                format!("reply lacks perplexity for length {l}"),
                                line,
                            ))
                        }
                        Some(v) if !v.is_finite() || *v <= 0.0 => {
                            return Err(Error::NonFinite(format!("backend perplexity at length {l}")))
                        }
                        Some(_) => {}
                    }
                }
                Ok(ppl)
            }
            Message::Error { message } => Err(Error::Backend(message)),
            _ => Err(Error::protocol("expected ok or error reply", line)),
        }
    }
}

impl Objective for ExternalEvaluator {
    fn evaluate(&self, plan: &ScalePlan) -> Result<f64> {
        combine_ppl(&self.evaluate_lengths(plan)?, &self.lengths)
    }

    fn describe(&self) -> String {
        format!("external_ppl({})", self.command)
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}
