//! Complete DPLL search under a pluggable branching policy, with exact
//! proof-tree accounting.
//!
//! Every DPLL call counts as one node: decision nodes, conflict leaves and
//! satisfied leaves alike. A refutation that branches once and hits two
//! conflicts therefore has size 3. In the depth-bounded (hybrid) variant the
//! node at which the subsolver is invoked is counted by the subsolver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Literal, Satisfiability, Status, SubproblemState, TransitionError};
use crate::subsolver::{FrontierSolver, SubsolverError, SubsolverHandle};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no unassigned variable to branch on")]
    NoCandidates,
    #[error("model failure: {0}")]
    Model(String),
}

/// Chooses the next branching variable among a state's candidate variables.
pub trait BranchingPolicy: Send {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError>;

    fn name(&self) -> String;
}

impl<P: BranchingPolicy + ?Sized> BranchingPolicy for Box<P> {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        (**self).choose(state)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<P: BranchingPolicy + ?Sized> BranchingPolicy for &mut P {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        (**self).choose(state)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Always branches on the lowest-numbered candidate.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedOrderPolicy;

impl BranchingPolicy for FixedOrderPolicy {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        state.candidate_vars().first().copied().ok_or(PolicyError::NoCandidates)
    }

    fn name(&self) -> String {
        "fixed".into()
    }
}

/// Two-sided Jeroslow-Wang scores, aligned with `state.candidate_vars()`:
/// each clause containing the variable in either polarity adds `2^-|clause|`.
pub fn jw_scores(state: &SubproblemState) -> (Vec<u32>, Vec<f64>) {
    let vars = state.candidate_vars();
    let mut by_var = vec![0.0f64; state.formula().num_vars() as usize + 1];
    for clause in state.residual() {
        let w = (-(clause.len() as f64)).exp2();
        for lit in clause.literals() {
            by_var[lit.var() as usize] += w;
        }
    }
    let scores = vars.iter().map(|&v| by_var[v as usize]).collect();
    (vars, scores)
}

/// Jeroslow-Wang branching, ties to the lowest variable index.
#[derive(Clone, Copy, Debug, Default)]
pub struct JwPolicy;

impl BranchingPolicy for JwPolicy {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        let (vars, scores) = jw_scores(state);
        let mut best: Option<(u32, f64)> = None;
        for (&v, &s) in vars.iter().zip(&scores) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((v, s));
            }
        }
        best.map(|(v, _)| v).ok_or(PolicyError::NoCandidates)
    }

    fn name(&self) -> String {
        "jw".into()
    }
}

/// Uniformly random branching, reproducible under its seed.
#[derive(Clone, Debug)]
pub struct UniformPolicy {
    rng: ChaCha8Rng,
}

impl UniformPolicy {
    pub fn new(seed: u64) -> Self {
        UniformPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl BranchingPolicy for UniformPolicy {
    fn choose(&mut self, state: &SubproblemState) -> Result<u32, PolicyError> {
        state
            .candidate_vars()
            .choose(&mut self.rng)
            .copied()
            .ok_or(PolicyError::NoCandidates)
    }

    fn name(&self) -> String {
        "uniform".into()
    }
}

pub fn jw_policy() -> JwPolicy {
    JwPolicy
}

pub fn uniform_policy(seed: u64) -> UniformPolicy {
    UniformPolicy::new(seed)
}

pub fn fixed_order_policy() -> FixedOrderPolicy {
    FixedOrderPolicy
}

/// Serializable name of a built-in policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicySpec {
    Jw,
    Fixed,
    Uniform { seed: u64 },
}

impl PolicySpec {
    pub fn build(self) -> Box<dyn BranchingPolicy> {
        match self {
            PolicySpec::Jw => Box::new(JwPolicy),
            PolicySpec::Fixed => Box::new(FixedOrderPolicy),
            PolicySpec::Uniform { seed } => Box::new(UniformPolicy::new(seed)),
        }
    }

    /// Builds the policy for a subsolver call rooted at `state`. Seeded
    /// policies mix in the state key so repeated calls on a state agree.
    pub fn build_for(self, state: &SubproblemState) -> Box<dyn BranchingPolicy> {
        match self {
            PolicySpec::Uniform { seed } => Box::new(UniformPolicy::new(seed ^ state.key().low_u64())),
            other => other.build(),
        }
    }

    pub fn is_deterministic(self) -> bool {
        !matches!(self, PolicySpec::Uniform { .. })
    }
}

impl std::str::FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jw" => Ok(PolicySpec::Jw),
            "fixed" => Ok(PolicySpec::Fixed),
            "uniform" => Ok(PolicySpec::Uniform { seed: 0 }),
            _ => match s.strip_prefix("uniform:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| PolicySpec::Uniform { seed })
                    .map_err(|_| format!("bad seed in `{s}`")),
                None => Err(format!("unknown policy `{s}` (expected jw, fixed, uniform[:seed])")),
            },
        }
    }
}

/// Which child DPLL explores first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityOrder {
    #[default]
    FalseFirst,
    TrueFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofTreeStats {
    /// Number of DPLL calls, terminal calls included.
    pub tree_size: u64,
    /// Number of branching decisions (internal nodes of the top tree).
    pub decisions: u64,
    pub leaf_count: u64,
    pub max_depth: usize,
    pub outcome: Satisfiability,
    pub subsolver_calls: u64,
}

#[derive(Debug, Error)]
pub enum DpllError {
    #[error("incomplete search: open subproblem at depth {depth} with no subsolver")]
    IncompleteSearch { depth: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Subsolver(#[from] SubsolverError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

struct Search<'a, 'b> {
    policy: &'a mut dyn BranchingPolicy,
    order: PolarityOrder,
    depth_limit: Option<usize>,
    frontier: Option<(usize, &'b mut dyn FrontierSolver)>,
    base_depth: usize,
    stats: ProofTreeStats,
}

impl Search<'_, '_> {
    fn visit(&mut self, state: &SubproblemState) -> Result<bool, DpllError> {
        let depth = state.decision_depth() - self.base_depth;
        self.stats.max_depth = self.stats.max_depth.max(depth);
        match state.status() {
            Status::Conflict => {
                self.stats.tree_size += 1;
                self.stats.leaf_count += 1;
                return Ok(false);
            }
            Status::Satisfied => {
                self.stats.tree_size += 1;
                self.stats.leaf_count += 1;
                return Ok(true);
            }
            Status::Open => {}
        }
        if let Some((ell, handle)) = self.frontier.as_mut() {
            if state.decision_depth() >= *ell {
                let sub = handle.solve_frontier(state)?;
                self.stats.tree_size += sub.tree_size;
                self.stats.leaf_count += sub.leaf_count;
                self.stats.max_depth = self.stats.max_depth.max(depth + sub.max_depth);
                self.stats.subsolver_calls += 1;
                return Ok(sub.outcome == Satisfiability::Satisfiable);
            }
        }
        if self.depth_limit.is_some_and(|limit| depth >= limit) {
            return Err(DpllError::IncompleteSearch { depth });
        }
        self.stats.tree_size += 1;
        self.stats.decisions += 1;
        let var = self.policy.choose(state)?;
        let first = match self.order {
            PolarityOrder::FalseFirst => Literal::negative(var),
            PolarityOrder::TrueFirst => Literal::positive(var),
        };
        if self.visit(&state.transition(first)?)? {
            return Ok(true);
        }
        self.visit(&state.transition(first.negated())?)
    }
}

fn run(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    order: PolarityOrder,
    depth_limit: Option<usize>,
    frontier: Option<(usize, &mut dyn FrontierSolver)>,
) -> Result<ProofTreeStats, DpllError> {
    let mut search = Search {
        policy,
        order,
        depth_limit,
        frontier,
        base_depth: root.decision_depth(),
        stats: ProofTreeStats {
            tree_size: 0,
            decisions: 0,
            leaf_count: 0,
            max_depth: 0,
            outcome: Satisfiability::Unsatisfiable,
            subsolver_calls: 0,
        },
    };
    if search.visit(root)? {
        search.stats.outcome = Satisfiability::Satisfiable;
    }
    Ok(search.stats)
}

/// Full DPLL from `root`. On UNSAT both children of every decision are
/// explored; on SAT the search stops at the first satisfied leaf.
/// `depth_limit` counts decisions below `root`; reaching it with an open
/// subproblem is an error.
pub fn dpll_solve(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    depth_limit: Option<usize>,
) -> Result<ProofTreeStats, DpllError> {
    run(root, policy, PolarityOrder::FalseFirst, depth_limit, None)
}

pub fn dpll_solve_ordered(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    order: PolarityOrder,
) -> Result<ProofTreeStats, DpllError> {
    run(root, policy, order, None, None)
}

/// `top_policy` branches at decision depth `< ell`; every open subproblem at
/// depth `ell` is handed to `subsolver`, whose tree size (root included) is
/// added to the total.
pub fn hybrid_solve(
    root: &SubproblemState,
    top_policy: &mut dyn BranchingPolicy,
    subsolver: &SubsolverHandle,
    ell: usize,
) -> Result<ProofTreeStats, DpllError> {
    let mut handle = subsolver;
    run(
        root,
        top_policy,
        PolarityOrder::FalseFirst,
        None,
        Some((ell, &mut handle)),
    )
}

/// [`hybrid_solve`] with any frontier solver, e.g. a
/// [`crate::subsolver::SubsolverCache`].
pub fn hybrid_solve_with(
    root: &SubproblemState,
    top_policy: &mut dyn BranchingPolicy,
    frontier: &mut dyn FrontierSolver,
    ell: usize,
) -> Result<ProofTreeStats, DpllError> {
    run(root, top_policy, PolarityOrder::FalseFirst, None, Some((ell, frontier)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{brute_force_sat, Formula, PropagationOptions};
    use crate::fixtures;
    use std::sync::Arc;

    fn root(n: u32, clauses: &[&[i32]], pure: bool) -> SubproblemState {
        SubproblemState::root(
            Arc::new(Formula::from_dimacs_clauses(n, clauses).unwrap()),
            PropagationOptions { pure_literals: pure },
        )
    }

    #[test]
    fn three_node_proof() {
        let r = fixtures::three_node_root(PropagationOptions::default());
        struct PickSix;
        impl BranchingPolicy for PickSix {
            fn choose(&mut self, _: &SubproblemState) -> Result<u32, PolicyError> {
                Ok(6)
            }
            fn name(&self) -> String {
                "x6".into()
            }
        }
        let stats = dpll_solve(&r, &mut PickSix, None).unwrap();
        assert_eq!(stats.tree_size, 3);
        assert_eq!(stats.decisions, 1);
        assert_eq!(stats.leaf_count, 2);
        assert_eq!(stats.outcome, Satisfiability::Unsatisfiable);
    }

    #[test]
    fn root_conflict_is_single_node() {
        let r = root(1, &[&[1], &[-1]], true);
        let stats = dpll_solve(&r, &mut JwPolicy, None).unwrap();
        assert_eq!(stats.tree_size, 1);
        assert_eq!(stats.max_depth, 0);
    }

    #[test]
    fn depth_limit_without_subsolver_errors() {
        let r = fixtures::three_node_root(PropagationOptions::default());
        let err = dpll_solve(&r, &mut JwPolicy, Some(0)).unwrap_err();
        assert!(matches!(err, DpllError::IncompleteSearch { depth: 0 }));
    }

    #[test]
    fn sat_stops_early() {
        let r = root(3, &[&[1, 2], &[-1, 3], &[-2, -3]], false);
        let stats = dpll_solve(&r, &mut FixedOrderPolicy, None).unwrap();
        assert_eq!(stats.outcome, Satisfiability::Satisfiable);
        let truth = brute_force_sat(r.formula()).unwrap();
        assert_eq!(truth, Satisfiability::Satisfiable);
    }

    #[test]
    fn polarity_order_does_not_change_unsat_size() {
        let r = fixtures::planted_short_proof(8, 3);
        let a = dpll_solve_ordered(&r, &mut FixedOrderPolicy, PolarityOrder::FalseFirst).unwrap();
        let b = dpll_solve_ordered(&r, &mut FixedOrderPolicy, PolarityOrder::TrueFirst).unwrap();
        assert_eq!(a.tree_size, b.tree_size);
    }

    #[test]
    fn jw_examples() {
        let s = SubproblemState::unsimplified(
            Arc::new(Formula::from_dimacs_clauses(2, &[&[1], &[1, 2]]).unwrap()),
            PropagationOptions::default(),
        );
        let (vars, scores) = jw_scores(&s);
        assert_eq!(vars, vec![1, 2]);
        assert_eq!(scores, vec![0.75, 0.25]);
        assert_eq!(JwPolicy.choose(&s).unwrap(), 1);
        let s = SubproblemState::unsimplified(
            Arc::new(Formula::from_dimacs_clauses(2, &[&[1, 2]]).unwrap()),
            PropagationOptions::default(),
        );
        assert_eq!(JwPolicy.choose(&s).unwrap(), 1);
        let done = SubproblemState::unsimplified(
            Arc::new(Formula::from_dimacs_clauses(0, &[]).unwrap()),
            PropagationOptions::default(),
        );
        assert!(matches!(JwPolicy.choose(&done), Err(PolicyError::NoCandidates)));
    }

    #[test]
    fn uniform_single_candidate_and_determinism() {
        let s = root(2, &[&[1, 2], &[-1, 2], &[1, -2]], false);
        let one = s.transition(Literal::positive(1)).unwrap();
        assert!(one.status() != Status::Open || one.candidate_vars().len() == 1);
        let only = SubproblemState::unsimplified(
            Arc::new(Formula::from_dimacs_clauses(3, &[&[2]]).unwrap()),
            PropagationOptions::default(),
        );
        let mut p = UniformPolicy::new(1);
        for _ in 0..10 {
            assert_eq!(p.choose(&only).unwrap(), 2);
        }
        let mut a = UniformPolicy::new(42);
        let mut b = UniformPolicy::new(42);
        for _ in 0..50 {
            assert_eq!(a.choose(&s).unwrap(), b.choose(&s).unwrap());
        }
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let s = SubproblemState::unsimplified(
            Arc::new(Formula::from_dimacs_clauses(3, &[&[1, 2, 3]]).unwrap()),
            PropagationOptions::default(),
        );
        let mut p = UniformPolicy::new(7);
        let draws = 30_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[p.choose(&s).unwrap() as usize] += 1;
        }
        let n = draws as f64;
        let sigma = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - n / 3.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn hybrid_degenerate_depths() {
        let r = fixtures::three_node_root(PropagationOptions::default());
        let sub = SubsolverHandle::internal(PolicySpec::Jw);
        let pure_sub = dpll_solve(&r, &mut JwPolicy, None).unwrap();
        let h0 = hybrid_solve(&r, &mut FixedOrderPolicy, &sub, 0).unwrap();
        assert_eq!(h0.tree_size, pure_sub.tree_size);
        assert_eq!(h0.subsolver_calls, 1);
        let h1 = hybrid_solve(&r, &mut FixedOrderPolicy, &sub, 1).unwrap();
        assert_eq!(h1.tree_size, 3);
        assert_eq!(h1.subsolver_calls, 0);
    }

    #[test]
    fn policy_spec_parsing() {
        assert_eq!("jw".parse::<PolicySpec>().unwrap(), PolicySpec::Jw);
        assert_eq!(
            "uniform:5".parse::<PolicySpec>().unwrap(),
            PolicySpec::Uniform { seed: 5 }
        );
        assert!("vsids".parse::<PolicySpec>().is_err());
    }
}
