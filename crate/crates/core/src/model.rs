//! Prior and value models.
//!
//! A [`PriorModel`] maps a state to a distribution over its candidate
//! variables (ascending variable order, see
//! [`SubproblemState::candidate_vars`]). A [`ValueModel`] predicts the log2
//! size of the subsolver's tree below a state. The built-in models are the
//! uniform and Jeroslow-Wang priors and a [`TableModel`] fitted to search
//! statistics, plus a [`LinearValueModel`] over residual-formula features;
//! external learned models plug in through
//! [`crate::bridge::BridgeModel`].

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::BridgeError;
use crate::cnf::{StateKey, SubproblemState};
use crate::dpll::{jw_scores, BranchingPolicy, PolicyError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state has no unassigned variables")]
    NoCandidates,
    #[error("inconsistent training data for key {key}: {reason}")]
    Inconsistent { key: StateKey, reason: String },
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("training record i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed training record on line {line}: {source}")]
    Record { line: usize, source: serde_json::Error },
    #[error("cannot fit value model: {0}")]
    Fit(String),
}

pub trait PriorModel: Send + Sync {
    /// Distribution over `state.candidate_vars()`, summing to 1.
    fn prior(&self, state: &SubproblemState) -> Result<Vec<f64>, ModelError>;

    /// Per-action cost estimates, when the model keeps them.
    fn q_values(&self, _state: &SubproblemState) -> Option<Vec<Option<f64>>> {
        None
    }

    fn name(&self) -> String;
}

pub trait ValueModel: Send + Sync {
    /// Predicted log2 of the subsolver tree size below `state`.
    fn log2_size(&self, state: &SubproblemState) -> Result<f64, ModelError>;
}

pub fn uniform_prior(state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
    let n = state.candidate_vars().len();
    if n == 0 {
        return Err(ModelError::NoCandidates);
    }
    Ok(vec![1.0 / n as f64; n])
}

/// Jeroslow-Wang scores normalized to a distribution; uniform when every
/// score is zero.
pub fn jw_prior(state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
    let (vars, scores) = jw_scores(state);
    if vars.is_empty() {
        return Err(ModelError::NoCandidates);
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return uniform_prior(state);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPrior;

impl PriorModel for UniformPrior {
    fn prior(&self, state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
        uniform_prior(state)
    }

    fn name(&self) -> String {
        "uniform".into()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct JwPrior;

impl PriorModel for JwPrior {
    fn prior(&self, state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
        jw_prior(state)
    }

    fn name(&self) -> String {
        "jw".into()
    }
}

/// Predicts the same log2 size everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantValue(pub f64);

impl ValueModel for ConstantValue {
    fn log2_size(&self, _state: &SubproblemState) -> Result<f64, ModelError> {
        Ok(self.0)
    }
}

/// Number of entries in [`state_features`].
pub const FEATURE_COUNT: usize = 6;

/// Bias, free variables, `ln(1 + free)`, binary clauses, longer clauses and
/// the clause-to-variable ratio of the residual formula.
pub fn state_features(state: &SubproblemState) -> [f64; FEATURE_COUNT] {
    let free = state.candidate_vars().len() as f64;
    let residual = state.residual();
    let binary = residual.iter().filter(|c| c.len() == 2).count() as f64;
    let longer = residual.iter().filter(|c| c.len() > 2).count() as f64;
    let clauses = residual.len() as f64;
    [1.0, free, free.ln_1p(), binary, longer, clauses / free.max(1.0)]
}

/// Ridge regression of log2 tree size on [`state_features`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearValueModel {
    pub weights: [f64; FEATURE_COUNT],
}

impl LinearValueModel {
    /// Least squares with an L2 penalty `ridge` on every weight but the bias.
    pub fn fit(samples: &[(SubproblemState, f64)], ridge: f64) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::Fit("no samples".into()));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(ModelError::Fit(format!("ridge must be non-negative, got {ridge}")));
        }
        const N: usize = FEATURE_COUNT;
        let mut a = [[0.0; N + 1]; N];
        for (state, y) in samples {
            if !y.is_finite() {
                return Err(ModelError::Fit(format!("non-finite target {y}")));
            }
            let x = state_features(state);
            for i in 0..N {
                for j in 0..N {
                    a[i][j] += x[i] * x[j];
                }
                a[i][N] += x[i] * y;
            }
        }
        for (i, row) in a.iter_mut().enumerate().skip(1) {
            row[i] += ridge;
        }
        Ok(LinearValueModel {
            weights: solve(a).ok_or_else(|| ModelError::Fit("singular system; add ridge".into()))?,
        })
    }

    pub fn predict(&self, state: &SubproblemState) -> f64 {
        let x = state_features(state);
        let y: f64 = x.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        if y.is_finite() {
            y.max(0.0)
        } else {
            0.0
        }
    }
}

/// Gauss-Jordan elimination with partial pivoting on an augmented matrix.
fn solve<const N: usize, const M: usize>(mut a: [[f64; M]; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for row in 0..N {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    let pivot_row = a[col];
                    for (x, p) in a[row].iter_mut().zip(pivot_row) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    let mut out = [0.0; N];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i][M - 1];
    }
    Some(out)
}

impl ValueModel for LinearValueModel {
    fn log2_size(&self, state: &SubproblemState) -> Result<f64, ModelError> {
        Ok(self.predict(state))
    }
}

/// Search statistics at one committed decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub key: StateKey,
    pub depth: usize,
    /// Candidate variables, ascending; indexes `counts` and `q`.
    pub actions: Vec<u32>,
    /// Visit counts normalized to sum to 1.
    pub counts: Vec<f64>,
    pub q: Vec<Option<f64>>,
    /// log2 of the exact size of the committed subtree, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log2_size: Option<f64>,
}

/// Exact subsolver tree size at a depth-bounded leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub key: StateKey,
    pub depth: usize,
    pub log2_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainingRecord {
    Policy(TrainingExample),
    Value(ValueRecord),
}

impl TrainingRecord {
    pub fn key(&self) -> StateKey {
        match self {
            TrainingRecord::Policy(e) => e.key,
            TrainingRecord::Value(v) => v.key,
        }
    }
}

/// Writes one JSON record per line.
pub fn write_records<W: Write>(mut out: W, records: &[TrainingRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<TrainingRecord>, ModelError> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| ModelError::Record { line: idx + 1, source })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub depth: usize,
    pub actions: Vec<u32>,
    pub counts: Vec<f64>,
    pub q: Vec<Option<f64>>,
    pub policy_weight: u32,
    pub log2_size: Option<f64>,
    pub value_weight: u32,
}

/// Per-state averages of training records, with a fallback prior for states
/// it has never seen.
#[derive(Clone)]
pub struct TableModel {
    entries: HashMap<StateKey, TableEntry>,
    fallback: Arc<dyn PriorModel>,
    default_log2: f64,
}

impl std::fmt::Debug for TableModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TableModel")
            .field("entries", &self.entries.len())
            .field("fallback", &self.fallback.name())
            .field("default_log2", &self.default_log2)
            .finish()
    }
}

/// Log2 size reported for unknown states: one node, so a cold table is
/// maximally wrong and the rollout policy routes traffic to the subsolver.
pub const DEFAULT_LOG2_SIZE: f64 = 0.0;

impl TableModel {
    pub fn empty(fallback: Arc<dyn PriorModel>) -> Self {
        TableModel {
            entries: HashMap::new(),
            fallback,
            default_log2: DEFAULT_LOG2_SIZE,
        }
    }

    pub fn with_default_log2(mut self, value: f64) -> Self {
        self.default_log2 = value;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, key: &StateKey) -> Option<&TableEntry> {
        self.entries.get(key)
    }

    pub fn fallback(&self) -> &Arc<dyn PriorModel> {
        &self.fallback
    }

    /// One averaged record per stored statistic, in key order.
    pub fn to_records(&self) -> Vec<TrainingRecord> {
        let mut keys: Vec<&StateKey> = self.entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            let e = &self.entries[key];
            if e.policy_weight > 0 {
                out.push(TrainingRecord::Policy(TrainingExample {
                    key: *key,
                    depth: e.depth,
                    actions: e.actions.clone(),
                    counts: e.counts.clone(),
                    q: e.q.clone(),
                    log2_size: None,
                }));
            }
            if let Some(v) = e.log2_size {
                out.push(TrainingRecord::Value(ValueRecord {
                    key: *key,
                    depth: e.depth,
                    log2_size: v,
                }));
            }
        }
        out
    }

    fn policy_entry(&self, state: &SubproblemState) -> Option<&TableEntry> {
        let entry = self.entries.get(&state.key())?;
        (entry.policy_weight > 0 && entry.actions == state.candidate_vars()).then_some(entry)
    }
}

impl PriorModel for TableModel {
    fn prior(&self, state: &SubproblemState) -> Result<Vec<f64>, ModelError> {
        match self.policy_entry(state) {
            Some(entry) => Ok(entry.counts.clone()),
            None => self.fallback.prior(state),
        }
    }

    fn q_values(&self, state: &SubproblemState) -> Option<Vec<Option<f64>>> {
        match self.policy_entry(state) {
            Some(entry) => Some(entry.q.clone()),
            None => self.fallback.q_values(state),
        }
    }

    fn name(&self) -> String {
        format!("table({} states)", self.entries.len())
    }
}

impl ValueModel for TableModel {
    fn log2_size(&self, state: &SubproblemState) -> Result<f64, ModelError> {
        Ok(table_value(self, state))
    }
}

/// Stored mean log2 size, or the configured default for unknown states.
pub fn table_value(model: &TableModel, state: &SubproblemState) -> f64 {
    model
        .entries
        .get(&state.key())
        .and_then(|e| e.log2_size)
        .unwrap_or(model.default_log2)
}

fn ordered_sum(mut xs: Vec<f64>) -> f64 {
    // fixed summation order keeps the fit independent of record order
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// Averages records per state key: count vectors, Q vectors (over the
/// records that have a value for each action) and log2 sizes.
pub fn fit_table(records: &[TrainingRecord], fallback: Arc<dyn PriorModel>) -> Result<TableModel, ModelError> {
    #[derive(Default)]
    struct Acc<'a> {
        policy: Vec<&'a TrainingExample>,
        log2: Vec<f64>,
        depth: Option<usize>,
    }
    let mut groups: HashMap<StateKey, Acc<'_>> = HashMap::new();
    for record in records {
        match record {
            TrainingRecord::Policy(e) => {
                if e.counts.len() != e.actions.len() || e.q.len() != e.actions.len() {
                    return Err(ModelError::Inconsistent {
                        key: e.key,
                        reason: format!(
                            "{} actions, {} counts, {} q values",
                            e.actions.len(),
                            e.counts.len(),
                            e.q.len()
                        ),
                    });
                }
                let acc = groups.entry(e.key).or_default();
                if let Some(first) = acc.policy.first() {
                    if first.actions != e.actions {
                        return Err(ModelError::Inconsistent {
                            key: e.key,
                            reason: format!("action sets {:?} and {:?}", first.actions, e.actions),
                        });
                    }
                }
                acc.depth = Some(acc.depth.map_or(e.depth, |d| d.min(e.depth)));
                acc.policy.push(e);
                if let Some(v) = e.log2_size {
                    acc.log2.push(v);
                }
            }
            TrainingRecord::Value(v) => {
                let acc = groups.entry(v.key).or_default();
                acc.depth = Some(acc.depth.map_or(v.depth, |d| d.min(v.depth)));
                acc.log2.push(v.log2_size);
            }
        }
    }

    let mut entries = HashMap::with_capacity(groups.len());
    for (key, acc) in groups {
        let n = acc.policy.len();
        let (actions, counts, q) = if n == 0 {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            let width = acc.policy[0].actions.len();
            let counts: Vec<f64> = (0..width)
                .map(|i| ordered_sum(acc.policy.iter().map(|e| e.counts[i]).collect()) / n as f64)
                .collect();
            let total: f64 = counts.iter().sum();
            let counts = if total > 0.0 {
                counts.iter().map(|c| c / total).collect()
            } else {
                vec![1.0 / width as f64; width]
            };
            let q = (0..width)
                .map(|i| {
                    let vals: Vec<f64> = acc.policy.iter().filter_map(|e| e.q[i]).collect();
                    let m = vals.len();
                    (m > 0).then(|| ordered_sum(vals) / m as f64)
                })
                .collect();
            (acc.policy[0].actions.clone(), counts, q)
        };
        let value_weight = acc.log2.len() as u32;
        let log2_size = (value_weight > 0).then(|| ordered_sum(acc.log2) / value_weight as f64);
        entries.insert(
            key,
            TableEntry {
                depth: acc.depth.unwrap_or(0),
                actions,
                counts,
                q,
                policy_weight: n as u32,
                log2_size,
                value_weight,
            },
        );
    }
    Ok(TableModel {
        entries,
        fallback,
        default_log2: DEFAULT_LOG2_SIZE,
    })
}

/// Branches on the highest-prior candidate. Ties go to the lower Q estimate
/// when the model has one, then to a random pick seeded by the state.
pub struct ModelPolicy {
    model: Arc<dyn PriorModel>,
    seed: u64,
}

impl ModelPolicy {
    pub fn new(model: Arc<dyn PriorModel>, seed: u64) -> Self {
        ModelPolicy { model, seed }
    }
}

const TIE_EPS: f64 = 1e-12;

impl BranchingPolicy for ModelPolicy {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        let vars = state.candidate_vars();
        if vars.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let prior = self.model.prior(state).map_err(|e| PolicyError::Model(e.to_string()))?;
        if prior.len() != vars.len() {
            return Err(PolicyError::Model(format!(
                "prior has {} entries for {} candidates",
                prior.len(),
                vars.len()
            )));
        }
        let best = prior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut tied: Vec<usize> = (0..vars.len()).filter(|&i| prior[i] >= best - TIE_EPS).collect();
        if tied.len() > 1 {
            if let Some(q) = self.model.q_values(state) {
                let low = tied
                    .iter()
                    .filter_map(|&i| q.get(i).copied().flatten())
                    .fold(f64::INFINITY, f64::min);
                if low.is_finite() {
                    tied.retain(|&i| {
                        q.get(i)
                            .copied()
                            .flatten()
                            .is_some_and(|v| v <= low + TIE_EPS * low.abs())
                    });
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ state.key().low_u64());
        let pick = *tied.choose(&mut rng).expect("at least one maximal entry");
        Ok(vars[pick])
    }

    fn name(&self) -> String {
        format!("argmax[{}]", self.model.name())
    }
}
