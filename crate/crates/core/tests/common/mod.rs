#![allow(dead_code)]

use std::sync::Arc;

use knuth_synth::cnf::{Formula, PropagationOptions, SubproblemState};
use knuth_synth::dpll::BranchingPolicy;
use knuth_synth::knuth::{node_estimate_from_path, sample_path, DepthBound};
use rand::{Rng, RngCore};

/// Replays a fixed coin sequence: each `gen::<bool>()` consumes one bit.
pub struct ScriptedCoins {
    bits: u64,
    next: u32,
}

impl ScriptedCoins {
    pub fn new(bits: u64) -> Self {
        ScriptedCoins { bits, next: 0 }
    }
}

impl RngCore for ScriptedCoins {
    fn next_u32(&mut self) -> u32 {
        let bit = (self.bits >> self.next) & 1;
        self.next += 1;
        if bit == 1 {
            0x8000_0000
        } else {
            0
        }
    }

    fn next_u64(&mut self) -> u64 {
        u64::from(self.next_u32()) << 32
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Expected node estimate over every coin sequence of length `max_len`,
/// each with probability `2^-max_len`. Paths shorter than `max_len` ignore
/// the unused coins.
pub fn exact_expectation(
    root: &SubproblemState,
    policy: &mut dyn BranchingPolicy,
    bound: Option<DepthBound<'_>>,
    max_len: u32,
) -> f64 {
    assert!(max_len <= 20);
    let mut total = 0.0;
    for bits in 0..(1u64 << max_len) {
        let mut coins = ScriptedCoins::new(bits);
        let path = sample_path(root, policy, bound, &mut coins).expect("path");
        assert!(path.len() as u32 <= max_len);
        total += node_estimate_from_path(&path).expect("unsat path");
    }
    total / (1u64 << max_len) as f64
}

/// Independent satisfiability check by enumerating assignments.
pub fn brute_sat(n: u32, clauses: &[Vec<i32>]) -> bool {
    (0..1u64 << n).any(|m| {
        clauses.iter().all(|c| {
            c.iter().any(|&l| {
                let v = (m >> (l.unsigned_abs() - 1)) & 1 == 1;
                if l > 0 {
                    v
                } else {
                    !v
                }
            })
        })
    })
}

/// `m` clauses of mixed width (1 to 3) over `n` variables.
pub fn random_clauses<R: Rng>(rng: &mut R, n: u32, m: usize) -> Vec<Vec<i32>> {
    (0..m)
        .map(|_| {
            let width = rng.gen_range(1..=3.min(n));
            let mut vars: Vec<u32> = Vec::new();
            while vars.len() < width as usize {
                let v = rng.gen_range(1..=n);
                if !vars.contains(&v) {
                    vars.push(v);
                }
            }
            vars.iter()
                .map(|&v| if rng.gen() { v as i32 } else { -(v as i32) })
                .collect()
        })
        .collect()
}

pub fn formula(n: u32, clauses: &[Vec<i32>]) -> Arc<Formula> {
    let refs: Vec<&[i32]> = clauses.iter().map(Vec::as_slice).collect();
    Arc::new(Formula::from_dimacs_clauses(n, &refs).expect("valid clauses"))
}

pub fn root(n: u32, clauses: &[Vec<i32>], pure_literals: bool) -> SubproblemState {
    SubproblemState::root(formula(n, clauses), PropagationOptions { pure_literals })
}

/// `m` clauses of exactly three distinct variables.
pub fn random_3cnf<R: Rng>(rng: &mut R, n: u32, m: usize) -> Vec<Vec<i32>> {
    (0..m)
        .map(|_| {
            let vars = rand::seq::index::sample(rng, n as usize, 3);
            vars.iter()
                .map(|v| if rng.gen() { v as i32 + 1 } else { -(v as i32 + 1) })
                .collect()
        })
        .collect()
}

/// Random UNSAT 3-CNF with `6..=max_vars` variables, found by rejection.
pub fn unsat_instances<R: Rng>(rng: &mut R, count: usize, max_vars: u32) -> Vec<(u32, Vec<Vec<i32>>)> {
    let mut out = Vec::new();
    while out.len() < count {
        let n = rng.gen_range(6..=max_vars);
        let m = rng.gen_range(5 * n as usize..=8 * n as usize);
        let clauses = random_3cnf(rng, n, m);
        if !brute_sat(n, &clauses) {
            out.push((n, clauses));
        }
    }
    out
}
