//! Line-delimited JSON bridge to an external model process.
//!
//! The process reads one request per line on stdin and answers with one line
//! on stdout. Startup handshake: `{"kind":"hello"}` answered by
//! `{"ok":true}`. Queries carry the residual formula:
//!
//! ```text
//! {"kind":"prior","vars":[1,4],"clauses":[[1,-4]],"assigned":[2,-3]}
//! {"prior":[0.25,0.75]}
//! {"kind":"value","vars":[1,4],"clauses":[[1,-4]],"assigned":[2,-3]}
//! {"value":3.5}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::SubproblemState;
use crate::model::{ModelError, PriorModel, ValueModel};

/// Largest tolerated deviation of a prior's sum from 1 before rejecting it.
pub const PRIOR_SUM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("could not start model process: {0}")]
    Spawn(std::io::Error),
    #[error("model process i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model process did not answer within {limit_ms} ms")]
    Timeout { limit_ms: u64 },
    #[error("model process closed its output")]
    Closed,
    #[error("model process is unusable after an earlier failure")]
    Dead,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("malformed response {line:?}: {reason}")]
    Malformed { line: String, reason: String },
    #[error("prior sums to {sum}, expected 1")]
    PriorSum { sum: f64 },
    #[error("prior has {got} entries for {expected} candidates")]
    PriorLength { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Prior,
    Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub kind: QueryKind,
    /// Candidate variables; the prior is aligned with this list.
    pub vars: Vec<u32>,
    /// Residual clauses in DIMACS literal notation.
    pub clauses: Vec<Vec<i32>>,
    /// Current assignment in DIMACS literal notation.
    pub assigned: Vec<i32>,
}

impl BridgeRequest {
    pub fn from_state(kind: QueryKind, state: &SubproblemState) -> Self {
        BridgeRequest {
            kind,
            vars: state.candidate_vars(),
            clauses: state
                .residual()
                .iter()
                .map(|c| c.literals().iter().map(|l| l.to_dimacs()).collect())
                .collect(),
            assigned: state.assigned_literals().iter().map(|l| l.to_dimacs()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BridgeAnswer {
    Prior(Vec<f64>),
    Value(f64),
}

#[derive(Deserialize)]
struct RawAnswer {
    prior: Option<Vec<f64>>,
    value: Option<f64>,
}

#[derive(Deserialize)]
struct RawHello {
    ok: bool,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    dead: bool,
}

impl Process {
    fn exchange(&mut self, request: &str, timeout: Duration) -> Result<String, BridgeError> {
        if self.dead {
            return Err(BridgeError::Dead);
        }
        let result = self.exchange_inner(request, timeout);
        if matches!(
            result,
            Err(BridgeError::Timeout { .. } | BridgeError::Closed | BridgeError::Io(_))
        ) {
            // a late answer would be paired with the next request
            self.dead = true;
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        result
    }

    fn exchange_inner(&mut self, request: &str, timeout: Duration) -> Result<String, BridgeError> {
        self.stdin.write_all(request.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(BridgeError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout {
                limit_ms: timeout.as_millis() as u64,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(BridgeError::Closed),
        }
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A running model process. Queries are serialized through a mutex.
pub struct BridgeModel {
    process: Mutex<Process>,
    timeout: Duration,
    fallback: Arc<dyn PriorModel>,
    label: String,
}

impl BridgeModel {
    /// Starts `program` and performs the handshake.
    pub fn spawn(
        program: impl Into<PathBuf>,
        args: &[String],
        timeout: Duration,
        fallback: Arc<dyn PriorModel>,
    ) -> Result<Self, BridgeError> {
        let program = program.into();
        let mut child = Command::new(&program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(BridgeError::Spawn)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });
        let model = BridgeModel {
            process: Mutex::new(Process {
                child,
                stdin,
                lines: rx,
                dead: false,
            }),
            timeout,
            fallback,
            label: program.display().to_string(),
        };
        let line = model.exchange(r#"{"kind":"hello"}"#)?;
        match serde_json::from_str::<RawHello>(&line) {
            Ok(RawHello { ok: true }) => Ok(model),
            Ok(_) => Err(BridgeError::Handshake(format!("model refused: {line}"))),
            Err(e) => Err(BridgeError::Handshake(format!("{line:?}: {e}"))),
        }
    }

    fn exchange(&self, request: &str) -> Result<String, BridgeError> {
        let mut process = self.process.lock().unwrap_or_else(|p| p.into_inner());
        process.exchange(request, self.timeout)
    }

    pub fn query(&self, request: &BridgeRequest) -> Result<BridgeAnswer, BridgeError> {
        let text = serde_json::to_string(request).expect("requests serialize");
        let line = self.exchange(&text)?;
        let malformed = |reason: String| BridgeError::Malformed {
            line: line.clone(),
            reason,
        };
        let raw: RawAnswer = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        match request.kind {
            QueryKind::Prior => {
                let prior = raw.prior.ok_or_else(|| malformed("missing \"prior\"".into()))?;
                validate_prior(prior, request.vars.len()).map(BridgeAnswer::Prior)
            }
            QueryKind::Value => {
                let value = raw.value.ok_or_else(|| malformed("missing \"value\"".into()))?;
                if !value.is_finite() {
                    return Err(malformed("non-finite value".into()));
                }
                Ok(BridgeAnswer::Value(value))
            }
        }
    }
}

/// Checks length and sum and renormalizes.
pub fn validate_prior(prior: Vec<f64>, expected: usize) -> Result<Vec<f64>, BridgeError> {
    if prior.len() != expected {
        return Err(BridgeError::PriorLength {
            got: prior.len(),
            expected,
        });
    }
    let sum: f64 = prior.iter().sum();
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > PRIOR_SUM_TOLERANCE {
        return Err(BridgeError::PriorSum { sum });
    }
    Ok(prior.iter().map(|p| p / sum).collect())
}

/// Sends one query for `state`.
pub fn bridge_query(
    bridge: &BridgeModel,
    kind: QueryKind,
    state: &SubproblemState,
) -> Result<BridgeAnswer, BridgeError> {
    bridge.query(&BridgeRequest::from_state(kind, state))
}

impl PriorModel for BridgeModel {
    /// Falls back to the configured prior when the bridge fails.
    fn prior(&self, state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
        match bridge_query(self, QueryKind::Prior, state) {
            Ok(BridgeAnswer::Prior(p)) => Ok(p),
            Ok(BridgeAnswer::Value(_)) => unreachable!("prior query answered with a value"),
            Err(_) => self.fallback.prior(state),
        }
    }

    fn name(&self) -> String {
        format!("bridge({})", self.label)
    }
}

impl ValueModel for BridgeModel {
    fn log2_size(&self, state: &SubproblemState) -> Result<f64, ModelError> {
        match bridge_query(self, QueryKind::Value, state)? {
            BridgeAnswer::Value(v) => Ok(v),
            BridgeAnswer::Prior(_) => unreachable!("value query answered with a prior"),
        }
    }
}
