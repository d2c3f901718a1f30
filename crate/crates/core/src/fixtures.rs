//! Small hand-built instances with known proof-tree structure.
//!
//! The three-node core is the four binary clauses over `x6` and `x7`: branching
//! on either variable yields a conflict in both children, so the refutation
//! has three nodes. The planted family hides that core among padding
//! variables that never propagate, so a policy that delays the core variables
//! by `k` decisions pays at least `2^k` nodes.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnf::{Clause, Formula, Literal, PropagationOptions, SubproblemState};

/// Variables of the unpadded three-node core.
pub const THREE_NODE_CORE: [u32; 2] = [6, 7];

/// `{x6 ∨ x7}, {x6 ∨ ¬x7}, {¬x6 ∨ x7}, {¬x6 ∨ ¬x7}` over seven variables.
pub fn three_node_formula() -> Formula {
    Formula::from_dimacs_clauses(7, &[&[6, 7], &[6, -7], &[-6, 7], &[-6, -7]]).expect("static fixture is well formed")
}

pub fn three_node_root(options: PropagationOptions) -> SubproblemState {
    SubproblemState::root(Arc::new(three_node_formula()), options)
}

/// A planted instance together with the two variables of its core.
#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub formula: Formula,
    pub core: [u32; 2],
}

/// The three-node core over two randomly placed variables, padded to
/// `num_vars` variables. Each padding variable `p` gets the clauses
/// `(p ∨ a ∨ b)` and `(¬p ∨ a' ∨ b')` where `a, a'` are literals of one core
/// variable and `b, b'` of the other; assigning `p` only ever reproduces a
/// core clause, so padding decisions neither propagate nor create pure
/// literals.
pub fn planted_short_proof_formula(num_vars: u32, seed: u64) -> PlantedInstance {
    assert!(num_vars >= 2, "the core needs two variables");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars: Vec<u32> = (1..=num_vars).collect();
    vars.shuffle(&mut rng);
    let (a, b) = (vars[0], vars[1]);
    let mut clauses: Vec<Clause> = [(true, true), (true, false), (false, true), (false, false)]
        .iter()
        .map(|&(pa, pb)| Clause::new([Literal::new(a, pa), Literal::new(b, pb)]).expect("distinct variables"))
        .collect();
    for &p in &vars[2..] {
        for polarity in [true, false] {
            let lits = [
                Literal::new(p, polarity),
                Literal::new(a, rng.gen()),
                Literal::new(b, rng.gen()),
            ];
            clauses.push(Clause::new(lits).expect("distinct variables"));
        }
    }
    clauses.shuffle(&mut rng);
    let mut core = [a, b];
    core.sort_unstable();
    PlantedInstance {
        formula: Formula::new(num_vars, clauses).expect("variables within range"),
        core,
    }
}

pub fn planted_short_proof(num_vars: u32, seed: u64) -> SubproblemState {
    let planted = planted_short_proof_formula(num_vars, seed);
    SubproblemState::root(Arc::new(planted.formula), PropagationOptions::default())
}
