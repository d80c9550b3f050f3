//! Encoder endpoint running in a child process.

use std::ffi::OsStr;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde_json::json;

use super::protocol::{EncodeRequest, Message, PROTOCOL_VERSION};
use super::{EncodeResult, FrameEncoder, GopSpec};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A launched and handshaken protocol endpoint.
///
/// Requests are single-flight. Any transport or contract failure is returned
/// to the caller as-is; nothing is retried or patched up.
pub struct ExternalEncoder {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    peer_name: String,
}

impl ExternalEncoder {
    pub fn launch<S, I, A>(program: S, args: I, timeout: Duration) -> Result<Self>
    where
        S: AsRef<OsStr>,
        I: IntoIterator<Item = A>,
        A: AsRef<OsStr>,
    {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("failed to launch endpoint: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Transport("endpoint has no stdout".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut endpoint = Self {
            child,
            stdin,
            lines: rx,
            timeout,
            peer_name: String::new(),
        };
        let reply = endpoint.request(&Message::new("hello", json!({})))?;
        if reply.kind != "hello" {
            return Err(Error::Protocol(format!(
                "expected hello, endpoint answered '{}'",
                reply.kind
            )));
        }
        endpoint.peer_name = reply
            .payload
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        Ok(endpoint)
    }

    pub fn peer_name(&self) -> &str {
        &self.peer_name
    }

    pub fn request(&mut self, msg: &Message) -> Result<Message> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("endpoint already closed".into()))?;
        writeln!(stdin, "{}", msg.to_line()?)
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Transport(format!("write failed: {e}")))?;
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Transport(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "no response within {:?}",
                    self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport("endpoint closed its output".into()))
            }
        };
        let reply = Message::parse(&line)?;
        if reply.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "endpoint speaks protocol_version {}, expected {PROTOCOL_VERSION}",
                reply.protocol_version
            )));
        }
        if reply.kind == "error" {
            let text = reply
                .payload
                .get("message")
                .and_then(|v| v.as_str())
                .unwrap_or("unspecified");
            return Err(Error::Protocol(format!("endpoint error: {text}")));
        }
        Ok(reply)
    }

    /// Code one frame remotely and validate the answer.
    pub fn external_encode(&mut self, frame_index: usize, qp: u8) -> Result<EncodeResult> {
        let req = EncodeRequest {
            frame: frame_index,
            qp,
        };
        let reply = self.request(&Message::new("encode", serde_json::to_value(req)?))?;
        if reply.kind != "result" {
            return Err(Error::Protocol(format!(
                "expected result, endpoint answered '{}'",
                reply.kind
            )));
        }
        let payload = reply.payload;
        let number = |key: &str| {
            payload
                .get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Transport(format!("result lacks numeric '{key}'")))
        };
        let bits = number("bits")?;
        let mse = number("mse")?;
        let qp_used = match payload.get("qp_used") {
            None => qp,
            Some(v) => v
                .as_u64()
                .and_then(|q| u8::try_from(q).ok())
                .ok_or_else(|| Error::Transport("qp_used is not a small integer".into()))?,
        };
        let r = EncodeResult { bits, mse, qp_used };
        r.validate()?;
        Ok(r)
    }

    /// Send `bye` and wait for the child to exit.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.stdin.is_none() {
            return Ok(());
        }
        let result = self.request(&Message::new("bye", json!({}))).map(|_| ());
        self.stdin = None;
        if result.is_err() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
        result
    }
}

impl FrameEncoder for ExternalEncoder {
    fn reset(&mut self, gop: &GopSpec) -> Result<()> {
        let reply = self.request(&Message::new("reset", serde_json::to_value(gop)?))?;
        if reply.kind != "ack" {
            return Err(Error::Protocol(format!(
                "expected ack, endpoint answered '{}'",
                reply.kind
            )));
        }
        Ok(())
    }

    fn encode(&mut self, frame_index: usize, qp: u8) -> Result<EncodeResult> {
        self.external_encode(frame_index, qp)
    }
}

impl Drop for ExternalEncoder {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            self.stdin = None;
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
