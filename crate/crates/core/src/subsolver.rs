//! Subsolvers: the fixed branching policy that finishes subproblems below the
//! learned-policy depth bound, either in-process or as an external binary.

use std::collections::HashMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Satisfiability, StateKey, SubproblemState};
use crate::dimacs::write_dimacs;
use crate::dpll::{dpll_solve, DpllError, PolicySpec, ProofTreeStats};

/// Environment variable that overrides the external subsolver executable.
pub const SUBSOLVER_ENV: &str = "KSYNTH_SUBSOLVER";

/// Argument-template token replaced by the path of the DIMACS file.
pub const CNF_TOKEN: &str = "{cnf}";

#[derive(Debug, Error)]
pub enum SubsolverError {
    #[error("external subsolver requested through an internal-policy handle")]
    KindMismatch,
    #[error("subsolver timed out after {limit_ms} ms")]
    Timeout { limit_ms: u64 },
    #[error("subsolver exited with status {code:?}: {output}")]
    ExitStatus { code: Option<i32>, output: String },
    #[error("could not find a node count in subsolver output: {output}")]
    Parse { output: String },
    #[error("invalid node-count pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("subsolver i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal subsolver: {0}")]
    Internal(Box<DpllError>),
}

/// An external solver process. `args` may contain [`CNF_TOKEN`]; the first
/// capture group of `pattern` must match the node count on standard output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalSubsolver {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub pattern: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl ExternalSubsolver {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, pattern: impl Into<String>) -> Self {
        ExternalSubsolver {
            program: program.into(),
            args,
            pattern: pattern.into(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout_ms = timeout.as_millis() as u64;
        self
    }

    /// Replaces the program with `$KSYNTH_SUBSOLVER` when it is set.
    pub fn with_env_override(mut self) -> Self {
        if let Some(path) = std::env::var_os(SUBSOLVER_ENV) {
            self.program = path.into();
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsolverHandle {
    Internal {
        #[serde(flatten)]
        policy: PolicySpec,
    },
    External(ExternalSubsolver),
}

impl Default for SubsolverHandle {
    fn default() -> Self {
        SubsolverHandle::internal(PolicySpec::Jw)
    }
}

impl SubsolverHandle {
    pub fn internal(policy: PolicySpec) -> Self {
        SubsolverHandle::Internal { policy }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            SubsolverHandle::Internal { policy } => policy.is_deterministic(),
            SubsolverHandle::External(_) => true,
        }
    }

    /// Solves the subproblem rooted at `state`. The returned size counts
    /// `state` itself.
    pub fn solve(&self, state: &SubproblemState) -> Result<ProofTreeStats, SubsolverError> {
        match self {
            SubsolverHandle::Internal { policy } => {
                let mut p = policy.build_for(state);
                dpll_solve(state, &mut p, None).map_err(|e| SubsolverError::Internal(Box::new(e)))
            }
            SubsolverHandle::External(ext) => {
                let run = run_process(ext, state)?;
                Ok(ProofTreeStats {
                    tree_size: run.tree_size,
                    decisions: 0,
                    leaf_count: 0,
                    max_depth: 0,
                    outcome: run.outcome,
                    subsolver_calls: 0,
                })
            }
        }
    }

    pub fn tree_size(&self, state: &SubproblemState) -> Result<u64, SubsolverError> {
        self.solve(state).map(|s| s.tree_size)
    }
}

/// Anything that can finish a subproblem at the depth bound.
pub trait FrontierSolver {
    fn solve_frontier(&mut self, state: &SubproblemState) -> Result<ProofTreeStats, SubsolverError>;
}

impl FrontierSolver for &SubsolverHandle {
    fn solve_frontier(&mut self, state: &SubproblemState) -> Result<ProofTreeStats, SubsolverError> {
        self.solve(state)
    }
}

/// Memoizes subsolver results by state key.
#[derive(Debug)]
pub struct SubsolverCache {
    handle: SubsolverHandle,
    results: HashMap<StateKey, ProofTreeStats>,
    calls: u64,
    hits: u64,
}

impl SubsolverCache {
    pub fn new(handle: SubsolverHandle) -> Self {
        SubsolverCache {
            handle,
            results: HashMap::new(),
            calls: 0,
            hits: 0,
        }
    }

    pub fn handle(&self) -> &SubsolverHandle {
        &self.handle
    }

    /// Returns the cached result for `state`, running the subsolver on a miss.
    /// The flag is true on a miss.
    pub fn lookup(&mut self, state: &SubproblemState) -> Result<(ProofTreeStats, bool), SubsolverError> {
        let key = state.key();
        if let Some(stats) = self.results.get(&key) {
            self.hits += 1;
            return Ok((*stats, false));
        }
        let stats = self.handle.solve(state)?;
        self.calls += 1;
        self.results.insert(key, stats);
        Ok((stats, true))
    }

    /// Subsolver invocations, cache hits excluded.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

impl FrontierSolver for SubsolverCache {
    fn solve_frontier(&mut self, state: &SubproblemState) -> Result<ProofTreeStats, SubsolverError> {
        self.lookup(state).map(|(s, _)| s)
    }
}

struct ExternalRun {
    tree_size: u64,
    outcome: Satisfiability,
}

/// Runs an external subsolver on the residual of `state` and returns the
/// node count it reports.
pub fn run_external_subsolver(handle: &SubsolverHandle, state: &SubproblemState) -> Result<u64, SubsolverError> {
    match handle {
        SubsolverHandle::External(ext) => run_process(ext, state).map(|r| r.tree_size),
        SubsolverHandle::Internal { .. } => Err(SubsolverError::KindMismatch),
    }
}

fn run_process(ext: &ExternalSubsolver, state: &SubproblemState) -> Result<ExternalRun, SubsolverError> {
    let pattern = Regex::new(&ext.pattern)?;
    let mut file = tempfile::Builder::new().suffix(".cnf").tempfile()?;
    std::io::Write::write_all(&mut file, write_dimacs(&state.residual_formula()).as_bytes())?;
    let cnf_path = file.path().to_string_lossy().into_owned();
    let args: Vec<String> = ext.args.iter().map(|a| a.replace(CNF_TOKEN, &cnf_path)).collect();

    let mut child = Command::new(&ext.program)
        .args(&args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = stdout.read_to_string(&mut s);
        s
    });
    let err_reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });

    let deadline = Instant::now() + Duration::from_millis(ext.timeout_ms);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(SubsolverError::Timeout {
                limit_ms: ext.timeout_ms,
            });
        }
        thread::sleep(Duration::from_millis(2));
    };
    let output = out_reader.join().unwrap_or_default();
    let errors = err_reader.join().unwrap_or_default();

    // 10 and 20 are the SAT-competition exit codes for SAT and UNSAT.
    let code = status.code();
    if !matches!(code, Some(0) | Some(10) | Some(20)) {
        return Err(SubsolverError::ExitStatus {
            code,
            output: format!("{output}{errors}"),
        });
    }
    let tree_size = pattern
        .captures(&output)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse::<u64>().ok())
        .ok_or_else(|| SubsolverError::Parse { output: output.clone() })?;
    let satisfiable = code == Some(10) || output.lines().any(|l| l.trim() == "s SATISFIABLE");
    Ok(ExternalRun {
        tree_size,
        outcome: if satisfiable {
            Satisfiability::Satisfiable
        } else {
            Satisfiability::Unsatisfiable
        },
    })
}
