//! Unbiased proof-tree size estimation from random root-to-leaf paths.
//!
//! A path is sampled by letting the branching policy pick the variable at each
//! node and a fair coin pick the child. For a binary tree in which a path of
//! `ℓ` decisions ends at a leaf of weight `T` (1 for a conflict, the
//! subsolver's tree size for a depth-bounded leaf), the node at depth `d` on
//! the path receives
//!
//! ```text
//! 2^(ℓ-d) · T + 2^(ℓ-d) - 1
//! ```
//!
//! whose expectation over coin flips is the exact size of the subtree below
//! that node. At `d = 0` this is the whole-tree estimate; for conflict-only
//! paths it reduces to `2^(ℓ+1) - 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{Literal, StateKey, Status, SubproblemState};
use crate::dpll::{BranchingPolicy, DpllError};
use crate::subsolver::SubsolverHandle;

#[derive(Debug, Error)]
pub enum KnuthError {
    #[error("path ends in a satisfied leaf; tree size is undefined")]
    SatisfiedTerminal,
    #[error("depth {d} outside path of length {len}")]
    DepthOutOfRange { d: usize, len: usize },
    #[error("sampled a satisfying branch: instance is satisfiable")]
    SatisfiableInstance,
    #[error("at least one sample is required")]
    NoSamples,
    #[error(transparent)]
    Search(#[from] DpllError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub key: StateKey,
    pub var: u32,
    /// The coin: `true` descends into the positive child.
    pub polarity: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTerminal {
    Conflict,
    /// Depth bound reached; carries the subsolver's tree size.
    Subsolver(u64),
    Satisfied,
}

impl PathTerminal {
    /// Leaf weight, or `None` for a satisfied leaf.
    pub fn weight(self) -> Option<u64> {
        match self {
            PathTerminal::Conflict => Some(1),
            PathTerminal::Subsolver(t) => Some(t),
            PathTerminal::Satisfied => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnuthPath {
    pub steps: Vec<PathStep>,
    pub terminal: PathTerminal,
}

impl KnuthPath {
    /// Number of decisions on the path.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Depth bound for sampling: below `ell` decisions the subsolver takes over.
#[derive(Clone, Copy, Debug)]
pub struct DepthBound<'a> {
    pub ell: usize,
    pub subsolver: &'a SubsolverHandle,
}

/// `2^levels · weight + 2^levels - 1`, in exact integer arithmetic while it
/// fits and in floating point beyond.
pub fn subtree_estimate(levels: usize, weight: u64) -> f64 {
    let exact = u32::try_from(levels)
        .ok()
        .and_then(|l| 1u128.checked_shl(l).filter(|_| l < 128))
        .and_then(|pow| pow.checked_mul(u128::from(weight)).and_then(|x| x.checked_add(pow - 1)));
    match exact {
        Some(v) => v as f64,
        None => {
            let pow = (levels as f64).exp2();
            pow * weight as f64 + pow - 1.0
        }
    }
}

/// Samples one path from `root`. Decision depths are absolute, so a bound of
/// `ell` stops at states with `ell` decisions.
pub fn sample_path<R: Rng + ?Sized>(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    bound: Option<DepthBound<'_>>,
    rng: &mut R,
) -> Result<KnuthPath, KnuthError> {
    let mut steps = Vec::new();
    let mut state = root.clone();
    let terminal = loop {
        match state.status() {
            Status::Conflict => break PathTerminal::Conflict,
            Status::Satisfied => break PathTerminal::Satisfied,
            Status::Open => {}
        }
        if let Some(b) = bound {
            if state.decision_depth() >= b.ell {
                let t = b.subsolver.tree_size(&state).map_err(DpllError::from)?;
                break PathTerminal::Subsolver(t);
            }
        }
        let var = policy.choose(&state).map_err(DpllError::from)?;
        let polarity: bool = rng.gen();
        steps.push(PathStep {
            key: state.key(),
            var,
            polarity,
        });
        state = state.transition(Literal::new(var, polarity)).map_err(DpllError::from)?;
    };
    Ok(KnuthPath { steps, terminal })
}

pub fn sample_path_seeded(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    bound: Option<DepthBound<'_>>,
    seed: u64,
) -> Result<KnuthPath, KnuthError> {
    sample_path(root, policy, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Whole-tree estimate from one path.
pub fn node_estimate_from_path(path: &KnuthPath) -> Result<f64, KnuthError> {
    depth_update_value(path, 0)
}

/// Backup value for the node at depth `d` of the path (relative to its start).
pub fn depth_update_value(path: &KnuthPath, d: usize) -> Result<f64, KnuthError> {
    let len = path.len();
    if d > len {
        return Err(KnuthError::DepthOutOfRange { d, len });
    }
    let weight = path.terminal.weight().ok_or(KnuthError::SatisfiedTerminal)?;
    Ok(subtree_estimate(len - d, weight))
}

/// Leaf-count estimate `2^ℓ`.
pub fn leaf_estimate_from_path(path: &KnuthPath) -> Result<f64, KnuthError> {
    if path.terminal == PathTerminal::Satisfied {
        return Err(KnuthError::SatisfiedTerminal);
    }
    Ok(subtree_estimate(path.len(), 1) - subtree_estimate(path.len(), 0))
}

/// Running mean and variance (Welford), mergeable across workers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub mean: f64,
    pub sample_count: u64,
    /// Sum of squared deviations from the mean.
    pub variance_accumulator: f64,
}

impl SizeEstimate {
    pub fn push(&mut self, x: f64) {
        self.sample_count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.sample_count as f64;
        self.variance_accumulator += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &SizeEstimate) -> SizeEstimate {
        if self.sample_count == 0 {
            return *other;
        }
        if other.sample_count == 0 {
            return *self;
        }
        let n = (self.sample_count + other.sample_count) as f64;
        let delta = other.mean - self.mean;
        SizeEstimate {
            mean: self.mean + delta * other.sample_count as f64 / n,
            sample_count: self.sample_count + other.sample_count,
            variance_accumulator: self.variance_accumulator
                + other.variance_accumulator
                + delta * delta * self.sample_count as f64 * other.sample_count as f64 / n,
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.sample_count < 2 {
            0.0
        } else {
            self.variance_accumulator / (self.sample_count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.sample_count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.sample_count as f64).sqrt()
    }
}

/// Which quantity a batch of paths estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateKind {
    Nodes,
    Leaves,
}

/// Mean of `k` independent path estimates.
pub fn estimate_tree_size(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    bound: Option<DepthBound<'_>>,
    k: usize,
    seed: u64,
) -> Result<SizeEstimate, KnuthError> {
    estimate(root, policy, bound, k, seed, EstimateKind::Nodes)
}

pub fn estimate(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    bound: Option<DepthBound<'_>>,
    k: usize,
    seed: u64,
    kind: EstimateKind,
) -> Result<SizeEstimate, KnuthError> {
    if k == 0 {
        return Err(KnuthError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = SizeEstimate::default();
    for _ in 0..k {
        let path = sample_path(root, policy, bound, &mut rng)?;
        if path.terminal == PathTerminal::Satisfied {
            return Err(KnuthError::SatisfiableInstance);
        }
        let x = match kind {
            EstimateKind::Nodes => node_estimate_from_path(&path)?,
            EstimateKind::Leaves => leaf_estimate_from_path(&path)?,
        };
        est.push(x);
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{Formula, PropagationOptions};
    use crate::dpll::{FixedOrderPolicy, JwPolicy, PolicySpec};
    use crate::fixtures;
    use std::sync::Arc;

    fn path(len: usize, terminal: PathTerminal) -> KnuthPath {
        let key = fixtures::three_node_root(PropagationOptions::default()).key();
        KnuthPath {
            steps: (0..len)
                .map(|i| PathStep {
                    key,
                    var: i as u32 + 1,
                    polarity: i % 2 == 0,
                })
                .collect(),
            terminal,
        }
    }

    #[test]
    fn node_estimates() {
        assert_eq!(node_estimate_from_path(&path(3, PathTerminal::Conflict)).unwrap(), 15.0);
        assert_eq!(
            node_estimate_from_path(&path(3, PathTerminal::Subsolver(5))).unwrap(),
            47.0
        );
        assert_eq!(node_estimate_from_path(&path(0, PathTerminal::Conflict)).unwrap(), 1.0);
        assert!(matches!(
            node_estimate_from_path(&path(2, PathTerminal::Satisfied)),
            Err(KnuthError::SatisfiedTerminal)
        ));
    }

    #[test]
    fn depth_updates() {
        assert_eq!(
            depth_update_value(&path(3, PathTerminal::Subsolver(5)), 1).unwrap(),
            23.0
        );
        assert_eq!(depth_update_value(&path(3, PathTerminal::Conflict), 3).unwrap(), 1.0);
        assert_eq!(
            depth_update_value(&path(3, PathTerminal::Subsolver(7)), 3).unwrap(),
            7.0
        );
        assert!(matches!(
            depth_update_value(&path(3, PathTerminal::Conflict), 4),
            Err(KnuthError::DepthOutOfRange { d: 4, len: 3 })
        ));
    }

    #[test]
    fn leaf_estimates() {
        assert_eq!(leaf_estimate_from_path(&path(3, PathTerminal::Conflict)).unwrap(), 8.0);
        assert_eq!(leaf_estimate_from_path(&path(0, PathTerminal::Conflict)).unwrap(), 1.0);
    }

    #[test]
    fn estimate_promotes_to_float_on_overflow() {
        assert_eq!(subtree_estimate(10, 3), 1024.0 * 3.0 + 1023.0);
        let big = subtree_estimate(130, 1);
        assert!((big / 2f64.powi(131) - 1.0).abs() < 1e-12);
        let wide = subtree_estimate(100, u64::MAX);
        assert!(wide.is_finite() && wide > 2f64.powi(163));
    }

    /// x1 false → conflict; x1 true → branch on x2, both conflict (5 nodes).
    fn five_node_root() -> SubproblemState {
        let f = Formula::from_dimacs_clauses(
            3,
            &[
                &[1, 3],
                &[1, -3],
                &[-1, 2, 3],
                &[-1, 2, -3],
                &[-1, -2, 3],
                &[-1, -2, -3],
            ],
        )
        .unwrap();
        SubproblemState::root(Arc::new(f), PropagationOptions { pure_literals: false })
    }

    #[test]
    fn five_node_tree_paths() {
        let root = five_node_root();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..64 {
            let p = sample_path(&root, &mut FixedOrderPolicy, None, &mut rng).unwrap();
            assert_eq!(p.terminal, PathTerminal::Conflict);
            seen.insert((
                p.len(),
                node_estimate_from_path(&p).unwrap() as u64,
                leaf_estimate_from_path(&p).unwrap() as u64,
            ));
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![(1, 3, 2), (2, 7, 4)]);
    }

    #[test]
    fn uniform_depth_tree_has_zero_variance() {
        // all eight 3-clauses over three variables: two decisions force a conflict
        let clauses: Vec<Vec<i32>> = (0..8)
            .map(|m| (0..3).map(|i| if m >> i & 1 == 1 { i + 1 } else { -(i + 1) }).collect())
            .collect();
        let refs: Vec<&[i32]> = clauses.iter().map(Vec::as_slice).collect();
        let root = SubproblemState::root(
            Arc::new(Formula::from_dimacs_clauses(3, &refs).unwrap()),
            PropagationOptions { pure_literals: false },
        );
        let est = estimate_tree_size(&root, &mut FixedOrderPolicy, None, 200, 1).unwrap();
        assert_eq!(est.mean, 7.0);
        assert_eq!(est.variance(), 0.0);
        let p = sample_path_seeded(&root, &mut FixedOrderPolicy, None, 9).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn root_conflict_and_zero_bound() {
        let f = Formula::from_dimacs_clauses(1, &[&[1], &[-1]]).unwrap();
        let root = SubproblemState::root(Arc::new(f), PropagationOptions::default());
        let p = sample_path_seeded(&root, &mut JwPolicy, None, 0).unwrap();
        assert_eq!(p.len(), 0);
        assert_eq!(p.terminal, PathTerminal::Conflict);

        let root = fixtures::planted_short_proof(6, 1);
        let sub = SubsolverHandle::internal(PolicySpec::Jw);
        let p = sample_path_seeded(
            &root,
            &mut JwPolicy,
            Some(DepthBound {
                ell: 0,
                subsolver: &sub,
            }),
            0,
        )
        .unwrap();
        assert_eq!(p.len(), 0);
        assert_eq!(p.terminal, PathTerminal::Subsolver(sub.tree_size(&root).unwrap()));
    }

    #[test]
    fn satisfiable_instance_is_rejected() {
        let f = Formula::from_dimacs_clauses(2, &[&[1, 2], &[-1, -2]]).unwrap();
        let root = SubproblemState::root(Arc::new(f), PropagationOptions { pure_literals: false });
        let err = estimate_tree_size(&root, &mut FixedOrderPolicy, None, 50, 0).unwrap_err();
        assert!(matches!(err, KnuthError::SatisfiableInstance));
        assert!(matches!(
            estimate_tree_size(&root, &mut FixedOrderPolicy, None, 0, 0),
            Err(KnuthError::NoSamples)
        ));
    }

    #[test]
    fn merge_matches_sequential() {
        let xs = [3.0, 7.0, 3.0, 15.0, 1.0, 7.0, 31.0];
        let mut all = SizeEstimate::default();
        let (mut a, mut b) = (SizeEstimate::default(), SizeEstimate::default());
        for (i, &x) in xs.iter().enumerate() {
            all.push(x);
            if i < 3 {
                a.push(x)
            } else {
                b.push(x)
            }
        }
        let m = a.merge(&b);
        assert_eq!(m.sample_count, all.sample_count);
        assert!((m.mean - all.mean).abs() < 1e-12);
        assert!((m.variance() - all.variance()).abs() < 1e-9);
    }
}
