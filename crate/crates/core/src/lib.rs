//! Proof-tree-size minimizing branching policies for DPLL.
//!
//! The crate provides CNF formulas with propagation ([`cnf`]), a DPLL solver
//! that counts proof-tree nodes ([`dpll`]), Knuth's tree-size estimator
//! ([`knuth`]), Monte Carlo forest search over branching decisions
//! ([`mcfs`]), prior and value models ([`model`], [`bridge`]) and the
//! experiment harness ([`harness`]).

pub mod bridge;
pub mod cnf;
pub mod config;
pub mod dimacs;
pub mod dpll;
pub mod fixtures;
pub mod generator;
pub mod harness;
pub mod knuth;
pub mod mcfs;
pub mod model;
pub mod subsolver;
