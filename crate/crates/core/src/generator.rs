//! Uniform random 3-SAT at the phase transition.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cnf::{Clause, Formula, Literal};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("random 3-SAT needs at least 3 variables, got {0}")]
    TooFewVariables(u32),
}

/// `round(4.258·v + 58.26·v^(-2/3))`.
pub fn r3sat_clause_count(num_vars: u32) -> usize {
    let v = f64::from(num_vars);
    (4.258 * v + 58.26 * v.powf(-2.0 / 3.0)).round() as usize
}

/// Number of distinct 3-clauses over `num_vars` variables.
fn distinct_clauses(num_vars: u32) -> u128 {
    let v = u128::from(num_vars);
    8 * v * (v - 1) * (v - 2) / 6
}

/// Random 3-SAT with [`r3sat_clause_count`] clauses, each over three distinct
/// variables with fair-coin polarities. Duplicate clauses are resampled
/// whenever enough distinct clauses exist (every `v ≥ 5`).
pub fn gen_r3sat(num_vars: u32, seed: u64) -> Result<Formula, GenError> {
    if num_vars < 3 {
        return Err(GenError::TooFewVariables(num_vars));
    }
    let m = r3sat_clause_count(num_vars);
    let dedup = distinct_clauses(num_vars) >= m as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<[i32; 3]> = HashSet::with_capacity(m);
    let mut clauses = Vec::with_capacity(m);
    while clauses.len() < m {
        let vars = sample(&mut rng, num_vars as usize, 3);
        let lits: Vec<Literal> = vars.iter().map(|i| Literal::new(i as u32 + 1, rng.gen())).collect();
        let mut canon = [0i32; 3];
        for (slot, lit) in canon.iter_mut().zip(&lits) {
            *slot = lit.to_dimacs();
        }
        canon.sort_unstable_by_key(|l| l.abs());
        if dedup && !seen.insert(canon) {
            continue;
        }
        clauses.push(Clause::new(lits).expect("distinct variables"));
    }
    Ok(Formula::new(num_vars, clauses).expect("variables within range"))
}
