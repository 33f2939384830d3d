//! Client side of the batch-scoring bridge to an external equivalence model.
//!
//! Wire format (one JSON object per line, compact, keys in this order):
//!
//! ```text
//! request:  {"id":"...","question":"...","reference":"...","candidate":"..."}
//! response: {"id":"...","score":0.93}
//! ```
//!
//! In stdio mode a batch is the request lines followed by one empty line; the
//! server answers with exactly one response line per request. A failed item
//! comes back as `{"id":"...","error":"..."}`. In HTTP mode the same objects
//! travel as a JSON array in the body of `POST /score`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Environment variable consulted for the bridge endpoint.
pub const BRIDGE_ENV: &str = "AEQUIV_BRIDGE";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("failed to start bridge `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bridge I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bridge timed out after {0:?}")]
    Timeout(Duration),
    #[error("bridge closed the stream after {got} of {expected} responses")]
    Closed { got: usize, expected: usize },
    #[error("bridge HTTP request failed: {0}")]
    Http(String),
    #[error("malformed bridge response `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("bridge response ids do not match the request batch: {0}")]
    IdMismatch(String),
    #[error("bridge reported an error for `{id}`: {message}")]
    Item { id: String, message: String },
    #[error("bridge score {score} for `{id}` is outside [0, 1]")]
    OutOfRange { id: String, score: f64 },
    #[error("no bridge endpoint given (pass one or set {BRIDGE_ENV})")]
    NoEndpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub question: String,
    pub reference: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScoreRequest {
    /// The exact request line sent over stdio.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

impl ScoreResponse {
    pub fn parse_line(line: &str) -> Result<Self, BridgeError> {
        serde_json::from_str(line).map_err(|e| BridgeError::Malformed {
            line: line.to_string(),
            reason: e.to_string(),
        })
    }
}

/// Moves one batch to the model and back.
pub trait Transport {
    fn exchange(&mut self, batch: &[ScoreRequest]) -> Result<Vec<ScoreResponse>, BridgeError>;
}

/// Where the bridge lives: an HTTP base URL or a command speaking stdio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(String),
    Command(String),
}

impl Endpoint {
    /// `http(s)://...` is HTTP; anything else is a shell command.
    pub fn parse(spec: &str) -> Self {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            Endpoint::Http(spec.trim_end_matches('/').to_string())
        } else {
            Endpoint::Command(spec.to_string())
        }
    }

    /// Explicit endpoint if non-empty, otherwise the environment variable.
    pub fn resolve(spec: Option<&str>) -> Result<Self, BridgeError> {
        match spec.filter(|s| !s.is_empty()) {
            Some(s) => Ok(Self::parse(s)),
            None => std::env::var(BRIDGE_ENV)
                .ok()
                .filter(|s| !s.is_empty())
                .map(|s| Self::parse(&s))
                .ok_or(BridgeError::NoEndpoint),
        }
    }
}

/// Line-delimited JSON over a child process's stdin/stdout.
pub struct StdioTransport {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl StdioTransport {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, BridgeError> {
        let spawn_err = |source| BridgeError::Spawn {
            command: command.to_string(),
            source,
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(spawn_err)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout,
        })
    }
}

impl Transport for StdioTransport {
    fn exchange(&mut self, batch: &[ScoreRequest]) -> Result<Vec<ScoreResponse>, BridgeError> {
        let mut payload = String::new();
        for r in batch {
            payload.push_str(&r.to_line());
            payload.push('\n');
        }
        payload.push('\n');
        // a process that already exited shows up as a broken pipe here
        let closed = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::BrokenPipe => BridgeError::Closed {
                got: 0,
                expected: batch.len(),
            },
            _ => e.into(),
        };
        self.stdin.write_all(payload.as_bytes()).map_err(closed)?;
        self.stdin.flush().map_err(closed)?;

        let mut out = Vec::with_capacity(batch.len());
        while out.len() < batch.len() {
            match self.lines.recv_timeout(self.timeout) {
                Ok(line) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    out.push(ScoreResponse::parse_line(&line)?);
                }
                Err(RecvTimeoutError::Timeout) => return Err(BridgeError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(BridgeError::Closed {
                        got: out.len(),
                        expected: batch.len(),
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// `POST {base}/score` with a JSON array body.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: format!("{}/score", base_url.trim_end_matches('/')),
        }
    }
}

impl Transport for HttpTransport {
    fn exchange(&mut self, batch: &[ScoreRequest]) -> Result<Vec<ScoreResponse>, BridgeError> {
        let resp = self
            .agent
            .post(&self.url)
            .send_json(batch)
            .map_err(|e| BridgeError::Http(e.to_string()))?;
        let body = resp.into_string()?;
        serde_json::from_str(&body).map_err(|e| BridgeError::Malformed {
            line: body.chars().take(200).collect(),
            reason: e.to_string(),
        })
    }
}

/// Batches requests, keeps one batch in flight and checks every response.
pub struct BridgeClient {
    transport: Box<dyn Transport + Send>,
    batch_size: usize,
    name: String,
}

impl BridgeClient {
    pub fn new(transport: Box<dyn Transport + Send>, batch_size: usize, name: impl Into<String>) -> Self {
        Self {
            transport,
            batch_size: batch_size.max(1),
            name: name.into(),
        }
    }

    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self, BridgeError> {
        Ok(match endpoint {
            Endpoint::Http(url) => Self::new(Box::new(HttpTransport::new(url, timeout)), DEFAULT_BATCH_SIZE, url.clone()),
            Endpoint::Command(cmd) => Self::new(
                Box::new(StdioTransport::spawn(cmd, timeout)?),
                DEFAULT_BATCH_SIZE,
                cmd.clone(),
            ),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Scores in request order.
    pub fn score(&mut self, requests: &[ScoreRequest]) -> Result<Vec<f64>, BridgeError> {
        let mut scores = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.batch_size) {
            let responses = self.transport.exchange(chunk)?;
            scores.extend(match_responses(chunk, responses)?);
        }
        Ok(scores)
    }
}

/// Pair responses with requests by id and validate each score.
pub fn match_responses(batch: &[ScoreRequest], responses: Vec<ScoreResponse>) -> Result<Vec<f64>, BridgeError> {
    if responses.len() != batch.len() {
        return Err(BridgeError::IdMismatch(format!(
            "{} responses for {} requests",
            responses.len(),
            batch.len()
        )));
    }
    let in_order = batch.iter().zip(&responses).all(|(q, r)| q.id == r.id);
    let ordered: Vec<ScoreResponse> = if in_order {
        responses
    } else {
        let mut by_id: std::collections::HashMap<String, ScoreResponse> = std::collections::HashMap::new();
        for r in responses {
            let id = r.id.clone();
            if by_id.insert(id.clone(), r).is_some() {
                return Err(BridgeError::IdMismatch(format!("duplicate response id `{id}`")));
            }
        }
        batch
            .iter()
            .map(|q| {
                by_id
                    .remove(&q.id)
                    .ok_or_else(|| BridgeError::IdMismatch(format!("no response for `{}`", q.id)))
            })
            .collect::<Result<_, _>>()?
    };
    ordered
        .into_iter()
        .map(|r| match (r.score, r.error) {
            (_, Some(message)) => Err(BridgeError::Item { id: r.id, message }),
            (None, None) => Err(BridgeError::Item {
                id: r.id,
                message: "response carries no score".into(),
            }),
            (Some(s), None) if !(0.0..=1.0).contains(&s) || !s.is_finite() => {
                Err(BridgeError::OutOfRange { id: r.id, score: s })
            }
            (Some(s), None) => Ok(s),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: &str) -> ScoreRequest {
        ScoreRequest {
            id: id.into(),
            question: "q".into(),
            reference: "r".into(),
            candidate: "c".into(),
        }
    }

    fn ok(id: &str, s: f64) -> ScoreResponse {
        ScoreResponse {
            id: id.into(),
            score: Some(s),
            error: None,
        }
    }

    #[test]
    fn request_line_is_bit_exact() {
        let r = ScoreRequest {
            id: "7".into(),
            question: "Who?".into(),
            reference: "Napoleon's".into(),
            candidate: "Napoleon \"I\"".into(),
        };
        assert_eq!(
            r.to_line(),
            r#"{"id":"7","question":"Who?","reference":"Napoleon's","candidate":"Napoleon \"I\""}"#
        );
        assert_eq!(serde_json::to_string(&ok("7", 0.93)).unwrap(), r#"{"id":"7","score":0.93}"#);
    }

    #[test]
    fn responses_reordered_by_id() {
        let batch = [req("a"), req("b")];
        let scores = match_responses(&batch, vec![ok("b", 0.2), ok("a", 0.7)]).unwrap();
        assert_eq!(scores, vec![0.7, 0.2]);
    }

    #[test]
    fn response_errors() {
        let batch = [req("a"), req("b")];
        assert!(matches!(match_responses(&batch, vec![ok("a", 0.1)]), Err(BridgeError::IdMismatch(_))));
        assert!(matches!(
            match_responses(&batch, vec![ok("a", 0.1), ok("a", 0.2)]),
            Err(BridgeError::IdMismatch(_))
        ));
        assert!(matches!(
            match_responses(&batch, vec![ok("a", 0.1), ok("b", 1.2)]),
            Err(BridgeError::OutOfRange { .. })
        ));
        let failed = ScoreResponse {
            id: "b".into(),
            score: None,
            error: Some("text too long".into()),
        };
        assert!(matches!(match_responses(&batch, vec![ok("a", 0.1), failed]), Err(BridgeError::Item { .. })));
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(Endpoint::parse("http://localhost:8080/"), Endpoint::Http("http://localhost:8080".into()));
        assert_eq!(Endpoint::parse("python3 serve.py"), Endpoint::Command("python3 serve.py".into()));
    }
}
