//! Line-delimited JSON protocol between the trainer and an external encoder.
//!
//! Every line is one message `{"type": ..., "protocol_version": 1, "payload": ...}`.
//!
//! | request  | payload                    | response                                   |
//! |----------|----------------------------|--------------------------------------------|
//! | `hello`  | `{}`                       | `hello` with `{"name": ...}`               |
//! | `reset`  | a scenario (`GopSpec`)     | `ack`                                      |
//! | `encode` | `{"frame": i, "qp": q}`    | `result` with `{"bits", "mse", "qp_used"}` |
//! | `bye`    | `{}`                       | `ack`, then the endpoint exits             |
//!
//! Failures are answered with `error` and `{"message": ...}`. One request is
//! in flight at a time.

use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{FrameEncoder, GopSpec, Simulator};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    #[serde(rename = "type")]
    pub kind: String,
    pub protocol_version: u32,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new(kind: &str, payload: Value) -> Self {
        Self {
            kind: kind.to_string(),
            protocol_version: PROTOCOL_VERSION,
            payload,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Transport(format!("malformed message: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub frame: usize,
    pub qp: u8,
}

/// Misbehaviours the bundled stub can be asked to exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubFault {
    NegativeBits,
    Malformed,
    WrongVersion,
}

impl std::str::FromStr for StubFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative-bits" => Ok(StubFault::NegativeBits),
            "malformed" => Ok(StubFault::Malformed),
            "wrong-version" => Ok(StubFault::WrongVersion),
            other => Err(Error::Config(format!("unknown stub fault '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubOptions {
    /// Sleep before answering each `encode`.
    pub delay: Duration,
    pub fault: Option<StubFault>,
}

fn error_message(text: impl Into<String>) -> Message {
    Message::new("error", json!({ "message": text.into() }))
}

/// Serve the protocol with the in-process simulator until `bye` or EOF.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, options: StubOptions) -> Result<()> {
    let mut sim = Simulator::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, done) = match Message::parse(&line) {
            Err(e) => (error_message(e.to_string()), false),
            Ok(msg) if msg.protocol_version != PROTOCOL_VERSION => (
                error_message(format!("unsupported protocol_version {}", msg.protocol_version)),
                false,
            ),
            Ok(msg) => match msg.kind.as_str() {
                "hello" => {
                    let mut m = Message::new("hello", json!({ "name": "simulator-stub" }));
                    if options.fault == Some(StubFault::WrongVersion) {
                        m.protocol_version = PROTOCOL_VERSION + 1;
                    }
                    (m, false)
                }
                "reset" => match serde_json::from_value::<GopSpec>(msg.payload) {
                    Ok(gop) => match gop.validate().and_then(|_| sim.reset(&gop)) {
                        Ok(()) => (Message::new("ack", json!({})), false),
                        Err(e) => (error_message(e.to_string()), false),
                    },
                    Err(e) => (error_message(format!("bad scenario: {e}")), false),
                },
                "encode" => {
                    if !options.delay.is_zero() {
                        std::thread::sleep(options.delay);
                    }
                    match serde_json::from_value::<EncodeRequest>(msg.payload) {
                        Ok(req) => match sim.encode(req.frame, req.qp) {
                            Ok(mut r) => {
                                if options.fault == Some(StubFault::NegativeBits) {
                                    r.bits = -1.0;
                                }
                                if options.fault == Some(StubFault::Malformed) {
                                    writeln!(output, "{{\"type\": \"result\", \"payload\": [")?;
                                    output.flush()?;
                                    continue;
                                }
                                (Message::new("result", serde_json::to_value(r)?), false)
                            }
                            Err(e) => (error_message(e.to_string()), false),
                        },
                        Err(e) => (error_message(format!("bad encode request: {e}")), false),
                    }
                }
                "bye" => (Message::new("ack", json!({})), true),
                other => (error_message(format!("unknown request type '{other}'")), false),
            },
        };
        writeln!(output, "{}", reply.to_line()?)?;
        output.flush()?;
        if done {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_gop, Difficulty, EncodeResult};

    fn converse(requests: &[Message], options: StubOptions) -> Vec<Message> {
        let input: String = requests
            .iter()
            .map(|m| m.to_line().unwrap() + "\n")
            .collect();
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, options).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| Message::parse(l).unwrap())
            .collect()
    }

    #[test]
    fn hello_reset_encode_bye() {
        let gop = build_gop(4, 1, Difficulty::Slow).unwrap();
        let replies = converse(
            &[
                Message::new("hello", json!({})),
                Message::new("reset", serde_json::to_value(&gop).unwrap()),
                Message::new("encode", json!({"frame": 0, "qp": 22})),
                Message::new("bye", json!({})),
                Message::new("hello", json!({})),
            ],
            StubOptions::default(),
        );
        let kinds: Vec<_> = replies.iter().map(|m| m.kind.as_str()).collect();
        assert_eq!(kinds, ["hello", "ack", "result", "ack"]);
        let r: EncodeResult = serde_json::from_value(replies[2].payload.clone()).unwrap();
        let mut sim = Simulator::new();
        sim.reset(&gop).unwrap();
        assert_eq!(r, sim.encode(0, 22).unwrap());
    }

    #[test]
    fn encode_before_reset_and_bad_version_are_errors() {
        let mut wrong = Message::new("hello", json!({}));
        wrong.protocol_version = 7;
        let replies = converse(
            &[Message::new("encode", json!({"frame": 0, "qp": 22})), wrong],
            StubOptions::default(),
        );
        assert!(replies.iter().all(|m| m.kind == "error"));
    }

    #[test]
    fn dependency_violation_reported_not_panicked() {
        let gop = build_gop(4, 1, Difficulty::Slow).unwrap();
        let replies = converse(
            &[
                Message::new("reset", serde_json::to_value(&gop).unwrap()),
                Message::new("encode", json!({"frame": 3, "qp": 22})),
            ],
            StubOptions::default(),
        );
        assert_eq!(replies[1].kind, "error");
    }
}
