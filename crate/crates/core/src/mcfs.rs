//! Monte Carlo forest search over branching decisions.
//!
//! Each rollout grows a small proof tree from a commitment root. The tree
//! policy α proposes a variable at every expanded node, the step policy γ
//! decides which nodes actually branch, and the rollout policy π values the
//! open subproblems left at the depth bound. Backed-up values are proof-tree
//! size estimates, so lower is better throughout.
//!
//! In the Knuth variant γ keeps exactly one child of every stepped node on
//! the sampled path; the unexplored sibling mirrors its value, which makes
//! the backup at depth `d` equal to `2^(ℓ'-d)·T + 2^(ℓ'-d) - 1`. In the
//! full-tree variant every open node above the bound branches and values are
//! exact subtree sizes.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Literal, Satisfiability, StateKey, Status, SubproblemState, TransitionError};
use crate::dpll::{hybrid_solve_with, BranchingPolicy, DpllError, PolicyError};
use crate::model::{ModelError, PriorModel, TrainingExample, TrainingRecord, ValueModel, ValueRecord};
use crate::subsolver::{SubsolverCache, SubsolverError, SubsolverHandle};

#[derive(Debug, Error)]
pub enum McfsError {
    #[error("state has no candidate actions")]
    NoActions,
    #[error("satisfiable branch found at decision depth {depth}")]
    SatisfiableBranch { depth: usize },
    #[error("prior has {got} entries for {expected} actions")]
    PriorShape { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subsolver(#[from] SubsolverError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Dpll(#[from] DpllError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutVariant {
    #[default]
    Knuth,
    FullTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitMode {
    MaxCount,
    SamplePrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McfsConfig {
    /// Decision depth at which the subsolver takes over.
    pub ell: usize,
    /// Rollouts per commitment.
    pub rollouts: usize,
    pub c_puct: f64,
    /// Probability of committing by sampling the prior instead of max count.
    pub commit_mix: f64,
    /// Error level `t` at which π stops trusting the value model.
    pub error_threshold: f64,
    /// Share statistics between transpositions (keyed by assignment set).
    pub dag: bool,
    /// Exponential weight for the per-depth calibration; `None` is the
    /// arithmetic mean.
    pub calibration_decay: Option<f64>,
    pub variant: RolloutVariant,
}

impl Default for McfsConfig {
    fn default() -> Self {
        McfsConfig {
            ell: 4,
            rollouts: 1_000,
            c_puct: 0.5,
            commit_mix: 0.5,
            error_threshold: 0.5,
            dag: true,
            calibration_decay: None,
            variant: RolloutVariant::Knuth,
        }
    }
}

impl McfsConfig {
    /// Full-scale search settings: 100 000 rollouts per commitment.
    pub fn full_scale(ell: usize) -> Self {
        McfsConfig {
            ell,
            rollouts: 100_000,
            ..McfsConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Model,
    Inherited,
}

/// Per-state action statistics. Visit counts start at 1; `q` is `None`
/// until the first backup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub key: StateKey,
    pub depth: usize,
    pub actions: Vec<u32>,
    pub visits: Vec<u64>,
    pub q: Vec<Option<f64>>,
    pub prior: Vec<f64>,
    pub prior_source: PriorSource,
}

impl SearchNode {
    pub fn new(
        key: StateKey,
        depth: usize,
        actions: Vec<u32>,
        prior: Vec<f64>,
        source: PriorSource,
    ) -> Result<Self, McfsError> {
        if actions.is_empty() {
            return Err(McfsError::NoActions);
        }
        if prior.len() != actions.len() {
            return Err(McfsError::PriorShape {
                got: prior.len(),
                expected: actions.len(),
            });
        }
        let n = actions.len();
        Ok(SearchNode {
            key,
            depth,
            actions,
            visits: vec![1; n],
            q: vec![None; n],
            prior,
            prior_source: source,
        })
    }

    pub fn action_index(&self, var: u32) -> Option<usize> {
        self.actions.binary_search(&var).ok()
    }

    /// Increments the count and folds `value` into the running mean.
    pub fn backup(&mut self, idx: usize, value: f64) {
        self.visits[idx] += 1;
        let samples = (self.visits[idx] - 1) as f64;
        self.q[idx] = Some(match self.q[idx] {
            None => value,
            Some(old) => old + (value - old) / samples,
        });
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    /// Number of backups received across all actions.
    pub fn backups(&self) -> u64 {
        self.total_visits() - self.actions.len() as u64
    }

    pub fn normalized_counts(&self) -> Vec<f64> {
        let total = self.total_visits() as f64;
        self.visits.iter().map(|&v| v as f64 / total).collect()
    }
}

/// Running average of backed-up values per decision depth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthCalibration {
    means: Vec<f64>,
    counts: Vec<u64>,
    decay: Option<f64>,
}

impl DepthCalibration {
    pub fn new(decay: Option<f64>) -> Self {
        DepthCalibration {
            means: Vec::new(),
            counts: Vec::new(),
            decay,
        }
    }

    pub fn update(&mut self, depth: usize, value: f64) {
        if depth >= self.means.len() {
            self.means.resize(depth + 1, 0.0);
            self.counts.resize(depth + 1, 0);
        }
        self.counts[depth] += 1;
        let n = self.counts[depth];
        let mean = &mut self.means[depth];
        *mean = match (n, self.decay) {
            (1, _) => value,
            (_, Some(w)) => (1.0 - w) * *mean + w * value,
            (_, None) => *mean + (value - *mean) / n as f64,
        };
    }

    pub fn get(&self, depth: usize) -> Option<f64> {
        (self.counts.get(depth).copied().unwrap_or(0) > 0).then(|| self.means[depth])
    }

    pub fn count(&self, depth: usize) -> u64 {
        self.counts.get(depth).copied().unwrap_or(0)
    }
}

/// Search statistics keyed by assignment set (DAG) or by decision path
/// (tree).
#[derive(Clone, Debug, Default)]
pub struct ForestStore {
    nodes: HashMap<StateKey, SearchNode>,
    dag: bool,
}

impl ForestStore {
    pub fn new(dag: bool) -> Self {
        ForestStore {
            nodes: HashMap::new(),
            dag,
        }
    }

    pub fn is_dag(&self) -> bool {
        self.dag
    }

    pub fn key_for(&self, state: &SubproblemState) -> StateKey {
        if self.dag {
            state.key()
        } else {
            state.path_key()
        }
    }

    pub fn get(&self, key: &StateKey) -> Option<&SearchNode> {
        self.nodes.get(key)
    }

    pub fn get_mut(&mut self, key: &StateKey) -> Option<&mut SearchNode> {
        self.nodes.get_mut(key)
    }

    pub fn node_for(&self, state: &SubproblemState) -> Option<&SearchNode> {
        self.nodes.get(&self.key_for(state))
    }

    pub fn insert(&mut self, node: SearchNode) {
        self.nodes.insert(node.key, node);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.values()
    }
}

const TIE_EPS: f64 = 1e-12;

fn pick<R: Rng + ?Sized>(candidates: &[usize], rng: &mut R) -> usize {
    *candidates.choose(rng).expect("non-empty candidate set")
}

/// Tree policy α: actions without a backup come first (highest prior, ties
/// random); afterwards the action minimizing `Q - Q_d · U` with
/// `U = c · P · sqrt(ΣN) / (1 + N)`.
pub fn tree_policy_alpha<R: Rng + ?Sized>(
    node: &SearchNode,
    calibration: &DepthCalibration,
    c_puct: f64,
    rng: &mut R,
) -> Result<usize, McfsError> {
    if node.actions.is_empty() {
        return Err(McfsError::NoActions);
    }
    let untried: Vec<usize> = (0..node.actions.len()).filter(|&i| node.q[i].is_none()).collect();
    if !untried.is_empty() {
        let best = untried.iter().map(|&i| node.prior[i]).fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = untried
            .into_iter()
            .filter(|&i| node.prior[i] >= best - TIE_EPS)
            .collect();
        return Ok(pick(&tied, rng));
    }
    let q_d = calibration.get(node.depth).unwrap_or(1.0);
    let sqrt_total = (node.total_visits() as f64).sqrt();
    let scores: Vec<f64> = (0..node.actions.len())
        .map(|i| {
            let u = c_puct * node.prior[i] * sqrt_total / (1.0 + node.visits[i] as f64);
            node.q[i].expect("all actions tried") - q_d * u
        })
        .collect();
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_EPS * best.abs().max(1.0);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] <= best + tol).collect();
    Ok(pick(&tied, rng))
}

/// Restricts the parent's prior to `child_actions` and renormalizes;
/// uniform when the restriction has no mass.
pub fn share_prior(parent: &SearchNode, child_actions: &[u32]) -> Result<Vec<f64>, McfsError> {
    if child_actions.is_empty() {
        return Err(McfsError::NoActions);
    }
    let raw: Vec<f64> = child_actions
        .iter()
        .map(|&v| parent.action_index(v).map_or(0.0, |i| parent.prior[i]))
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(raw.iter().map(|p| p / total).collect())
    } else {
        Ok(vec![1.0 / child_actions.len() as f64; child_actions.len()])
    }
}

/// Index of the committed action.
pub fn commit_action<R: Rng + ?Sized>(node: &SearchNode, mode: CommitMode, rng: &mut R) -> usize {
    match mode {
        CommitMode::MaxCount => {
            let most = *node.visits.iter().max().expect("non-empty");
            let tied: Vec<usize> = (0..node.actions.len()).filter(|&i| node.visits[i] == most).collect();
            let low = tied.iter().filter_map(|&i| node.q[i]).fold(f64::INFINITY, f64::min);
            let tied: Vec<usize> = if low.is_finite() {
                tied.into_iter()
                    .filter(|&i| node.q[i].is_some_and(|q| q <= low))
                    .collect()
            } else {
                tied
            };
            pick(&tied, rng)
        }
        CommitMode::SamplePrior => match WeightedIndex::new(&node.prior) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.gen_range(0..node.actions.len()),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    Conflict,
    Frontier,
    Satisfied,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    /// Not yet processed.
    Pending,
    Stepped {
        action: u32,
    },
    /// End of a sampled path.
    Terminal(TerminalKind),
    /// Not on the sampled path; takes its sibling's value.
    Mirrored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Conflict,
    ValueModel,
    Subsolver,
}

#[derive(Clone)]
pub struct RolloutNode {
    /// Computed lazily: an off-path sibling in a Knuth rollout never is.
    pub state: Option<SubproblemState>,
    /// Literal assigned by the parent's decision.
    pub decision: Option<Literal>,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Option<(usize, usize)>,
    pub on_path: bool,
    pub role: NodeRole,
    pub value: Option<f64>,
    pub source: Option<EvalSource>,
}

/// The proof tree built by one rollout. Node 0 is the root; children always
/// follow their parent.
#[derive(Clone)]
pub struct RolloutTree {
    pub nodes: Vec<RolloutNode>,
    pub ell: usize,
    /// States computed by transitions during this rollout.
    pub transitions: u64,
}

impl RolloutTree {
    pub fn new(root: SubproblemState, ell: usize) -> Self {
        RolloutTree {
            nodes: vec![RolloutNode {
                depth: root.decision_depth(),
                state: Some(root),
                decision: None,
                parent: None,
                children: None,
                on_path: false,
                role: NodeRole::Pending,
                value: None,
                source: None,
            }],
            ell,
            transitions: 0,
        }
    }

    pub fn sibling(&self, id: usize) -> Option<usize> {
        let (l, r) = self.nodes[self.nodes[id].parent?].children?;
        Some(if l == id { r } else { l })
    }

    /// State of node `id`, if it has been computed.
    pub fn state(&self, id: usize) -> Option<&SubproblemState> {
        self.nodes[id].state.as_ref()
    }

    /// Computes the state of `id` from its parent's.
    pub fn materialize(&mut self, id: usize) -> Result<&SubproblemState, TransitionError> {
        if self.nodes[id].state.is_none() {
            let parent = self.nodes[id].parent.expect("only the root lacks a parent");
            if self.nodes[parent].state.is_none() {
                self.materialize(parent)?;
            }
            let lit = self.nodes[id].decision.expect("child nodes carry their decision");
            let state = self.nodes[parent]
                .state
                .as_ref()
                .expect("materialized")
                .transition(lit)?;
            self.nodes[id].state = Some(state);
            self.transitions += 1;
        }
        Ok(self.nodes[id].state.as_ref().expect("materialized"))
    }

    /// Whether `id` could branch: open and above the depth bound.
    pub fn steppable(&mut self, id: usize) -> Result<bool, TransitionError> {
        let ell = self.ell;
        let s = self.materialize(id)?;
        Ok(s.is_open() && s.decision_depth() < ell)
    }

    fn terminal_kind(&mut self, id: usize) -> Result<TerminalKind, TransitionError> {
        Ok(match self.materialize(id)?.status() {
            Status::Conflict => TerminalKind::Conflict,
            Status::Satisfied => TerminalKind::Satisfied,
            Status::Open => TerminalKind::Frontier,
        })
    }

    fn add_children(&mut self, id: usize, action: u32) -> (usize, usize) {
        let base = self.nodes.len();
        let depth = self.nodes[id].depth + 1;
        for lit in [Literal::negative(action), Literal::positive(action)] {
            self.nodes.push(RolloutNode {
                state: None,
                decision: Some(lit),
                depth,
                parent: Some(id),
                children: None,
                on_path: false,
                role: NodeRole::Pending,
                value: None,
                source: None,
            });
        }
        self.nodes[id].role = NodeRole::Stepped { action };
        self.nodes[id].children = Some((base, base + 1));
        (base, base + 1)
    }

    pub fn stepped(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].role, NodeRole::Stepped { .. }))
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].role, NodeRole::Terminal(_)))
    }

    pub fn root_value(&self) -> Option<f64> {
        self.nodes[0].value
    }
}

/// Decides whether node `id` lies on the sampled path and, if so, whether
/// it branches. The root is always on the path; the first child of a stepped
/// node to be processed flips a fair coin and its sibling takes the other
/// side. Nodes that do not branch get their final role here; only on-path
/// nodes have their state computed.
pub fn gamma_decide<R: Rng + ?Sized>(tree: &mut RolloutTree, id: usize, rng: &mut R) -> Result<bool, TransitionError> {
    let on_path = match tree.nodes[id].parent {
        None => true,
        Some(p) if !tree.nodes[p].on_path => false,
        Some(_) => {
            let sib = tree.sibling(id).expect("children come in pairs");
            if tree.nodes[sib].role == NodeRole::Pending {
                rng.gen::<bool>()
            } else {
                !tree.nodes[sib].on_path
            }
        }
    };
    tree.nodes[id].on_path = on_path;
    if !on_path {
        tree.nodes[id].role = NodeRole::Mirrored;
        return Ok(false);
    }
    let step = tree.steppable(id)?;
    if !step {
        tree.nodes[id].role = NodeRole::Terminal(tree.terminal_kind(id)?);
    }
    Ok(step)
}

/// Step policy γ: plays `proposed` at node `id` when it is on the sampled
/// path and can branch.
pub fn step_policy_gamma<R: Rng + ?Sized>(
    tree: &mut RolloutTree,
    id: usize,
    proposed: u32,
    rng: &mut R,
) -> Result<Option<u32>, TransitionError> {
    if gamma_decide(tree, id, rng)? {
        tree.add_children(id, proposed);
        Ok(Some(proposed))
    } else {
        Ok(None)
    }
}

fn full_decide(tree: &mut RolloutTree, id: usize) -> Result<bool, TransitionError> {
    tree.nodes[id].on_path = true;
    let step = tree.steppable(id)?;
    if !step {
        tree.nodes[id].role = NodeRole::Terminal(tree.terminal_kind(id)?);
    }
    Ok(step)
}

/// Fills in values bottom-up: a stepped node is worth one plus its children,
/// a mirrored child copies its on-path sibling.
fn propagate_values(tree: &mut RolloutTree, id: usize) -> f64 {
    if let Some((l, r)) = tree.nodes[id].children {
        let vl = tree.nodes[l].on_path.then(|| propagate_values(tree, l));
        let vr = tree.nodes[r].on_path.then(|| propagate_values(tree, r));
        let (vl, vr) = match (vl, vr) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, a),
            (None, Some(b)) => (b, b),
            (None, None) => unreachable!("a stepped node keeps at least one child on the path"),
        };
        tree.nodes[l].value = Some(vl);
        tree.nodes[r].value = Some(vr);
        let v = 1.0 + vl + vr;
        tree.nodes[id].value = Some(v);
        v
    } else {
        tree.nodes[id].value.expect("terminal evaluated before backup")
    }
}

/// Backs the rollout's values up into `store` and `calibration`. Every
/// stepped node records the value of its subtree under its action.
pub fn backup(tree: &mut RolloutTree, store: &mut ForestStore, calibration: &mut DepthCalibration) {
    propagate_values(tree, 0);
    for id in tree.stepped().collect::<Vec<_>>() {
        let node = &tree.nodes[id];
        let NodeRole::Stepped { action } = node.role else {
            unreachable!()
        };
        let value = node.value.expect("propagated");
        let depth = node.depth;
        let key = store.key_for(node.state.as_ref().expect("stepped nodes are materialized"));
        if let Some(entry) = store.get_mut(&key) {
            if let Some(idx) = entry.action_index(action) {
                entry.backup(idx, value);
            }
        }
        calibration.update(depth, value);
    }
}

/// Rollout policy π state: the running mean `ε` of the absolute natural-log
/// error between subsolver sizes and value-model predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPolicy {
    pub threshold: f64,
    pub epsilon: f64,
    pub error_samples: u64,
    pub subsolver_evaluations: u64,
    pub value_evaluations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiOutcome {
    /// Estimated subtree size, the evaluated node included.
    pub size: f64,
    pub source: EvalSource,
}

impl RolloutPolicy {
    pub fn new(threshold: f64) -> Self {
        RolloutPolicy {
            threshold,
            epsilon: 0.0,
            error_samples: 0,
            subsolver_evaluations: 0,
            value_evaluations: 0,
        }
    }

    /// `1 - min(1, ε / t)`; zero before the first error sample.
    pub fn value_probability(&self) -> f64 {
        if self.error_samples == 0 {
            return 0.0;
        }
        if self.threshold <= 0.0 {
            return if self.epsilon <= 0.0 { 1.0 } else { 0.0 };
        }
        1.0 - (self.epsilon / self.threshold).min(1.0)
    }

    pub fn record_error(&mut self, m: f64) {
        let n = self.error_samples as f64;
        self.epsilon = if self.error_samples == 0 {
            m
        } else {
            self.epsilon + (m - self.epsilon) / (n + 1.0)
        };
        self.error_samples += 1;
    }
}

/// Rollout policy π: values `state` with the value model with probability
/// [`RolloutPolicy::value_probability`], otherwise with the (cached)
/// subsolver, in which case the model's error is folded into `ε`.
pub fn rollout_policy_pi<R: Rng + ?Sized>(
    pi: &mut RolloutPolicy,
    state: &SubproblemState,
    value_model: Option<&dyn ValueModel>,
    cache: &mut SubsolverCache,
    rng: &mut R,
) -> Result<PiOutcome, McfsError> {
    if let Some(model) = value_model {
        let p = pi.value_probability();
        if p > 0.0 && rng.gen::<f64>() < p {
            pi.value_evaluations += 1;
            return Ok(PiOutcome {
                size: model.log2_size(state)?.exp2(),
                source: EvalSource::ValueModel,
            });
        }
    }
    let (stats, _) = cache.lookup(state)?;
    if stats.outcome == Satisfiability::Satisfiable {
        return Err(McfsError::SatisfiableBranch {
            depth: state.decision_depth(),
        });
    }
    pi.subsolver_evaluations += 1;
    if let Some(model) = value_model {
        let predicted = model.log2_size(state)?;
        let m = ((stats.tree_size as f64).ln() - predicted * std::f64::consts::LN_2).abs();
        pi.record_error(m);
    }
    Ok(PiOutcome {
        size: stats.tree_size as f64,
        source: EvalSource::Subsolver,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub rollouts: u64,
    /// Policy queries, transitions and leaf evaluations.
    pub expanded: u64,
    pub alpha_queries: u64,
    pub transitions: u64,
    pub leaf_evaluations: u64,
    pub model_queries: u64,
}

/// One committed decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub key: StateKey,
    pub depth: usize,
    pub action: u32,
    pub mode: CommitMode,
    pub actions: Vec<u32>,
    pub visits: Vec<u64>,
    pub q: Vec<Option<f64>>,
    pub prior: Vec<f64>,
}

/// Writes commit records as JSON lines.
pub fn write_trace<W: Write>(mut out: W, trace: &[CommitRecord]) -> std::io::Result<()> {
    for record in trace {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// Exact size of the committed proof tree, subsolver trees included.
    pub tree_size: u64,
    pub trace: Vec<CommitRecord>,
    pub records: Vec<TrainingRecord>,
    pub stats: EngineStats,
    pub store_size: usize,
}

/// Search state for one instance.
pub struct Engine<'m> {
    config: McfsConfig,
    store: ForestStore,
    calibration: DepthCalibration,
    prior_model: &'m dyn PriorModel,
    value_model: Option<&'m dyn ValueModel>,
    cache: SubsolverCache,
    pi: RolloutPolicy,
    rng: ChaCha8Rng,
    seed: u64,
    stats: EngineStats,
}

impl<'m> Engine<'m> {
    pub fn new(
        config: McfsConfig,
        prior_model: &'m dyn PriorModel,
        value_model: Option<&'m dyn ValueModel>,
        subsolver: SubsolverHandle,
        seed: u64,
    ) -> Self {
        Engine {
            store: ForestStore::new(config.dag),
            calibration: DepthCalibration::new(config.calibration_decay),
            pi: RolloutPolicy::new(config.error_threshold),
            config,
            prior_model,
            value_model,
            cache: SubsolverCache::new(subsolver),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            stats: EngineStats::default(),
        }
    }

    pub fn config(&self) -> &McfsConfig {
        &self.config
    }

    pub fn store(&self) -> &ForestStore {
        &self.store
    }

    pub fn calibration(&self) -> &DepthCalibration {
        &self.calibration
    }

    pub fn rollout_policy(&self) -> &RolloutPolicy {
        &self.pi
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn subsolver_calls(&self) -> u64 {
        self.cache.calls()
    }

    fn model_prior(&mut self, state: &SubproblemState, expected: usize) -> Result<Vec<f64>, McfsError> {
        self.stats.model_queries += 1;
        let prior = self.prior_model.prior(state)?;
        if prior.len() != expected {
            return Err(McfsError::PriorShape {
                got: prior.len(),
                expected,
            });
        }
        Ok(prior)
    }

    /// Makes `state` a search root, querying the prior model unless the node
    /// already has a model prior.
    pub fn prepare_root(&mut self, state: &SubproblemState) -> Result<StateKey, McfsError> {
        let key = self.store.key_for(state);
        match self.store.get(&key).map(|n| (n.prior_source, n.actions.len())) {
            Some((PriorSource::Model, _)) => {}
            Some((PriorSource::Inherited, n)) => {
                let prior = self.model_prior(state, n)?;
                let node = self.store.get_mut(&key).expect("present");
                node.prior = prior;
                node.prior_source = PriorSource::Model;
            }
            None => {
                let actions = state.candidate_vars();
                let prior = self.model_prior(state, actions.len())?;
                self.store.insert(SearchNode::new(
                    key,
                    state.decision_depth(),
                    actions,
                    prior,
                    PriorSource::Model,
                )?);
            }
        }
        Ok(key)
    }

    fn ensure_node(&mut self, state: &SubproblemState, parent: Option<StateKey>) -> Result<StateKey, McfsError> {
        let key = self.store.key_for(state);
        if self.store.get(&key).is_some() {
            return Ok(key);
        }
        let actions = state.candidate_vars();
        let (prior, source) = match parent.and_then(|k| self.store.get(&k)) {
            Some(p) => (share_prior(p, &actions)?, PriorSource::Inherited),
            None => (self.model_prior(state, actions.len())?, PriorSource::Model),
        };
        self.store
            .insert(SearchNode::new(key, state.decision_depth(), actions, prior, source)?);
        Ok(key)
    }

    fn evaluate_terminal(&mut self, tree: &mut RolloutTree, id: usize) -> Result<(), McfsError> {
        let NodeRole::Terminal(kind) = tree.nodes[id].role else {
            return Ok(());
        };
        let (value, source) = match kind {
            TerminalKind::Conflict => (1.0, EvalSource::Conflict),
            TerminalKind::Satisfied => {
                return Err(McfsError::SatisfiableBranch {
                    depth: tree.nodes[id].depth,
                })
            }
            TerminalKind::Frontier => {
                self.stats.leaf_evaluations += 1;
                self.stats.expanded += 1;
                let state = tree.state(id).expect("terminals are materialized");
                match self.config.variant {
                    RolloutVariant::Knuth => {
                        let out =
                            rollout_policy_pi(&mut self.pi, state, self.value_model, &mut self.cache, &mut self.rng)?;
                        (out.size, out.source)
                    }
                    RolloutVariant::FullTree => {
                        let (stats, _) = self.cache.lookup(state)?;
                        if stats.outcome == Satisfiability::Satisfiable {
                            return Err(McfsError::SatisfiableBranch {
                                depth: state.decision_depth(),
                            });
                        }
                        (stats.tree_size as f64, EvalSource::Subsolver)
                    }
                }
            }
        };
        tree.nodes[id].value = Some(value);
        tree.nodes[id].source = Some(source);
        Ok(())
    }

    /// One rollout from `root`, backed up into the store.
    pub fn rollout(&mut self, root: &SubproblemState) -> Result<RolloutTree, McfsError> {
        let mut tree = RolloutTree::new(root.clone(), self.config.ell);
        let mut queue = VecDeque::from([0usize]);
        while let Some(id) = queue.pop_front() {
            let step = match self.config.variant {
                RolloutVariant::Knuth => gamma_decide(&mut tree, id, &mut self.rng)?,
                RolloutVariant::FullTree => full_decide(&mut tree, id)?,
            };
            if !step {
                self.evaluate_terminal(&mut tree, id)?;
                continue;
            }
            let parent_key = tree.nodes[id]
                .parent
                .map(|p| self.store.key_for(tree.state(p).expect("parents are materialized")));
            let key = self.ensure_node(tree.state(id).expect("materialized by the step decision"), parent_key)?;
            let node = self.store.get(&key).expect("just ensured");
            let mut ties = tie_rng(self.seed, &key, node.backups());
            let idx = tree_policy_alpha(node, &self.calibration, self.config.c_puct, &mut ties)?;
            let action = node.actions[idx];
            self.stats.alpha_queries += 1;
            self.stats.expanded += 1;
            let (l, r) = tree.add_children(id, action);
            queue.push_back(l);
            queue.push_back(r);
        }
        self.stats.transitions += tree.transitions;
        self.stats.expanded += tree.transitions;
        backup(&mut tree, &mut self.store, &mut self.calibration);
        self.stats.rollouts += 1;
        Ok(tree)
    }

    /// `k` rollouts from `root`.
    pub fn search(&mut self, root: &SubproblemState, k: usize) -> Result<(), McfsError> {
        if root.is_open() && root.decision_depth() < self.config.ell {
            self.prepare_root(root)?;
        }
        for _ in 0..k {
            self.rollout(root)?;
        }
        Ok(())
    }

    /// Searches from `state` and commits to one action.
    pub fn commit(&mut self, state: &SubproblemState) -> Result<CommitRecord, McfsError> {
        let key = self.prepare_root(state)?;
        for _ in 0..self.config.rollouts {
            self.rollout(state)?;
        }
        let mode = if self.rng.gen::<f64>() < self.config.commit_mix {
            CommitMode::SamplePrior
        } else {
            CommitMode::MaxCount
        };
        let node = self.store.get(&key).expect("prepared");
        let idx = commit_action(node, mode, &mut self.rng);
        Ok(CommitRecord {
            key: state.key(),
            depth: state.decision_depth(),
            action: node.actions[idx],
            mode,
            actions: node.actions.clone(),
            visits: node.visits.clone(),
            q: node.q.clone(),
            prior: node.prior.clone(),
        })
    }

    fn solve_committed(
        &mut self,
        state: &SubproblemState,
        trace: &mut Vec<CommitRecord>,
        records: &mut Vec<TrainingRecord>,
    ) -> Result<u64, McfsError> {
        match state.status() {
            Status::Conflict => return Ok(1),
            Status::Satisfied => {
                return Err(McfsError::SatisfiableBranch {
                    depth: state.decision_depth(),
                })
            }
            Status::Open => {}
        }
        if state.decision_depth() >= self.config.ell {
            let (stats, _) = self.cache.lookup(state)?;
            if stats.outcome == Satisfiability::Satisfiable {
                return Err(McfsError::SatisfiableBranch {
                    depth: state.decision_depth(),
                });
            }
            records.push(TrainingRecord::Value(ValueRecord {
                key: state.key(),
                depth: state.decision_depth(),
                log2_size: (stats.tree_size as f64).log2(),
            }));
            return Ok(stats.tree_size);
        }
        let commit = self.commit(state)?;
        let total = commit.visits.iter().sum::<u64>() as f64;
        let slot = records.len();
        records.push(TrainingRecord::Policy(TrainingExample {
            key: commit.key,
            depth: commit.depth,
            actions: commit.actions.clone(),
            counts: commit.visits.iter().map(|&v| v as f64 / total).collect(),
            q: commit.q.clone(),
            log2_size: None,
        }));
        let action = commit.action;
        trace.push(commit);
        let (l, r) = state.children(action)?;
        let size = 1 + self.solve_committed(&l, trace, records)? + self.solve_committed(&r, trace, records)?;
        if let TrainingRecord::Policy(e) = &mut records[slot] {
            e.log2_size = Some((size as f64).log2());
        }
        Ok(size)
    }

    /// Commits depth-first from `root` down to the depth bound and returns
    /// the resulting proof tree with its training data.
    pub fn run_episode(&mut self, root: &SubproblemState) -> Result<Episode, McfsError> {
        let mut trace = Vec::new();
        let mut records = Vec::new();
        let tree_size = self.solve_committed(root, &mut trace, &mut records)?;
        Ok(Episode {
            tree_size,
            trace,
            records,
            stats: self.stats,
            store_size: self.store.len(),
        })
    }

    /// Exact hybrid tree size of the current incumbent policy (see
    /// [`StorePolicy`]).
    pub fn incumbent_tree_size(&mut self, root: &SubproblemState) -> Result<u64, McfsError> {
        let mut policy = StorePolicy {
            store: &self.store,
            fallback: self.prior_model,
            seed: self.seed,
        };
        let stats = hybrid_solve_with(root, &mut policy, &mut self.cache, self.config.ell)?;
        if stats.outcome == Satisfiability::Satisfiable {
            return Err(McfsError::SatisfiableBranch { depth: 0 });
        }
        Ok(stats.tree_size)
    }
}

/// Random stream for α's tie-breaking at `key` after `backups` backups. Keyed
/// rather than sequential, so searches that reach a state with the same
/// statistics break its ties identically.
fn tie_rng(seed: u64, key: &StateKey, backups: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ key.low_u64() ^ backups.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Follows the most-visited action at searched states (ties to the lower Q,
/// then a random pick seeded by the state) and the highest-prior action
/// elsewhere.
pub struct StorePolicy<'a> {
    pub store: &'a ForestStore,
    pub fallback: &'a dyn PriorModel,
    pub seed: u64,
}

impl BranchingPolicy for StorePolicy<'_> {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ state.key().low_u64());
        if let Some(node) = self.store.node_for(state).filter(|n| n.backups() > 0) {
            let idx = commit_action(node, CommitMode::MaxCount, &mut rng);
            return Ok(node.actions[idx]);
        }
        let actions = state.candidate_vars();
        if actions.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let prior = self
            .fallback
            .prior(state)
            .map_err(|e| PolicyError::Model(e.to_string()))?;
        let best = prior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..prior.len()).filter(|&i| prior[i] >= best - TIE_EPS).collect();
        Ok(actions[pick(&tied, &mut rng)])
    }

    fn name(&self) -> String {
        "store-argmax".into()
    }
}

/// Runs one episode on `root` with a fresh search state.
pub fn run_episode(
    root: &SubproblemState,
    prior_model: &dyn PriorModel,
    value_model: Option<&dyn ValueModel>,
    subsolver: &SubsolverHandle,
    config: &McfsConfig,
    seed: u64,
) -> Result<Episode, McfsError> {
    Engine::new(config.clone(), prior_model, value_model, subsolver.clone(), seed).run_episode(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{Formula, PropagationOptions};
    use crate::fixtures;
    use crate::knuth::subtree_estimate;
    use crate::model::UniformPrior;
    use std::sync::Arc;

    fn key(n: u8) -> StateKey {
        let mut s = fixtures::three_node_root(PropagationOptions::default());
        for v in 1..=n as u32 {
            s = s.transition(crate::cnf::Literal::negative(v)).unwrap();
        }
        s.key()
    }

    fn node(q: [f64; 2], n: [u64; 2], p: [f64; 2]) -> SearchNode {
        let mut node = SearchNode::new(key(0), 0, vec![1, 2], p.to_vec(), PriorSource::Model).unwrap();
        node.q = q.iter().map(|&x| Some(x)).collect();
        node.visits = n.to_vec();
        node
    }

    #[test]
    fn alpha_prefers_low_q_and_exploration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut calib = DepthCalibration::new(None);
        calib.update(0, 10.0);
        assert_eq!(
            tree_policy_alpha(&node([10.0, 20.0], [1, 1], [0.5, 0.5]), &calib, 0.5, &mut rng).unwrap(),
            0
        );
        let mut calib = DepthCalibration::new(None);
        calib.update(0, 100.0);
        assert_eq!(
            tree_policy_alpha(&node([10.0, 10.0], [1, 1], [0.9, 0.1]), &calib, 1.0, &mut rng).unwrap(),
            0
        );
        let mut calib = DepthCalibration::new(None);
        calib.update(0, 0.0);
        let mut seen = [0; 2];
        for _ in 0..200 {
            seen[tree_policy_alpha(&node([10.0, 10.0], [1, 1], [0.9, 0.1]), &calib, 1.0, &mut rng).unwrap()] += 1;
        }
        assert!(seen[0] > 50 && seen[1] > 50);
    }

    #[test]
    fn backup_means_and_counts() {
        let mut n = SearchNode::new(key(0), 0, vec![3], vec![1.0], PriorSource::Model).unwrap();
        n.backup(0, 10.0);
        assert_eq!((n.visits[0], n.q[0]), (2, Some(10.0)));
        n.backup(0, 20.0);
        assert_eq!((n.visits[0], n.q[0]), (3, Some(15.0)));
    }

    #[test]
    fn sharing_renormalizes() {
        let mut parent = SearchNode::new(key(0), 0, vec![1, 2, 3], vec![0.5, 0.25, 0.25], PriorSource::Model).unwrap();
        assert_eq!(share_prior(&parent, &[2, 3]).unwrap(), vec![0.5, 0.5]);
        parent.prior = vec![1.0, 0.0, 0.0];
        assert_eq!(share_prior(&parent, &[2, 3]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(share_prior(&parent, &[]), Err(McfsError::NoActions)));
    }

    #[test]
    fn calibration_modes() {
        let mut c = DepthCalibration::new(None);
        for v in [2.0, 4.0, 9.0] {
            c.update(3, v);
        }
        assert_eq!(c.get(3), Some(5.0));
        assert_eq!(c.get(2), None);
        let mut d = DepthCalibration::new(Some(0.5));
        d.update(0, 2.0);
        d.update(0, 4.0);
        assert_eq!(d.get(0), Some(3.0));
    }

    #[test]
    fn pi_error_tracking() {
        let mut pi = RolloutPolicy::new(0.5);
        assert_eq!(pi.value_probability(), 0.0);
        pi.record_error(0.3);
        assert_eq!(pi.epsilon, 0.3);
        assert!((pi.value_probability() - 0.4).abs() < 1e-12);
        let mut zero = RolloutPolicy::new(0.5);
        zero.record_error(0.0);
        assert_eq!(zero.value_probability(), 1.0);
        let mut big = RolloutPolicy::new(0.5);
        big.record_error(0.6);
        assert_eq!(big.value_probability(), 0.0);
    }

    #[test]
    fn commit_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = node([5.0, 3.0], [7, 7], [0.5, 0.5]);
        assert_eq!(commit_action(&n, CommitMode::MaxCount, &mut rng), 1);
        let n = node([5.0, 3.0], [9, 7], [0.0, 1.0]);
        assert_eq!(commit_action(&n, CommitMode::MaxCount, &mut rng), 0);
        assert_eq!(commit_action(&n, CommitMode::SamplePrior, &mut rng), 1);
    }

    #[test]
    fn knuth_rollout_is_a_single_path_with_eq1_backups() {
        let root = fixtures::planted_short_proof(8, 3);
        let cfg = McfsConfig {
            ell: 5,
            ..McfsConfig::default()
        };
        let mut engine = Engine::new(cfg, &UniformPrior, None, SubsolverHandle::default(), 9);
        engine.prepare_root(&root).unwrap();
        for _ in 0..50 {
            let tree = engine.rollout(&root).unwrap();
            let terminals: Vec<usize> = tree.terminals().collect();
            assert_eq!(terminals.len(), 1);
            let t = terminals[0];
            let end = tree.nodes[t].depth;
            let weight = tree.nodes[t].value.unwrap() as u64;
            for id in tree.stepped() {
                assert!(tree.nodes[id].on_path);
                let d = tree.nodes[id].depth;
                assert_eq!(tree.nodes[id].value.unwrap(), subtree_estimate(end - d, weight));
            }
            for id in 1..tree.nodes.len() {
                let sib = tree.sibling(id).unwrap();
                assert_ne!(tree.nodes[id].on_path, tree.nodes[sib].on_path);
            }
        }
    }

    #[test]
    fn full_tree_rollout_backs_up_exact_sizes() {
        let root = fixtures::three_node_root(PropagationOptions::default());
        let cfg = McfsConfig {
            ell: 3,
            variant: RolloutVariant::FullTree,
            ..McfsConfig::default()
        };
        let mut engine = Engine::new(cfg, &UniformPrior, None, SubsolverHandle::default(), 0);
        let tree = engine.rollout(&root).unwrap();
        assert_eq!(tree.root_value(), Some(3.0));
        assert_eq!(tree.nodes.len(), 3);
    }

    #[test]
    fn episode_on_forced_conflict() {
        let f = Formula::from_dimacs_clauses(2, &[&[1, 2], &[1, -2], &[-1, 2], &[-1, -2]]).unwrap();
        let root = SubproblemState::root(Arc::new(f), PropagationOptions::default());
        let cfg = McfsConfig {
            ell: 1,
            rollouts: 4,
            ..McfsConfig::default()
        };
        let ep = run_episode(&root, &UniformPrior, None, &SubsolverHandle::default(), &cfg, 0).unwrap();
        assert_eq!(ep.trace.len(), 1);
        assert_eq!(ep.tree_size, 3);
        let mut buf = Vec::new();
        write_trace(&mut buf, &ep.trace).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn satisfiable_branch_aborts() {
        let f = Formula::from_dimacs_clauses(3, &[&[1, 2, 3]]).unwrap();
        let root = SubproblemState::root(Arc::new(f), PropagationOptions { pure_literals: false });
        let cfg = McfsConfig {
            ell: 2,
            rollouts: 2,
            ..McfsConfig::default()
        };
        let err = run_episode(&root, &UniformPrior, None, &SubsolverHandle::default(), &cfg, 0).unwrap_err();
        assert!(matches!(err, McfsError::SatisfiableBranch { .. }));
    }
}
