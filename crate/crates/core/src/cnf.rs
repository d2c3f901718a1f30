//! CNF formulas and the DPLL state transition.
//!
//! A [`SubproblemState`] is the residual formula left after a sequence of
//! branching decisions, together with every assignment (decided or forced)
//! made on the way there. States are immutable values: [`SubproblemState::transition`]
//! returns a new state and leaves its input untouched, so a state can be handed
//! to another thread or kept in a search store without synchronization.

use std::fmt;
use std::ops::Not;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;
use thiserror::Error;

/// Default variable bound for [`brute_force_sat`].
pub const ORACLE_VAR_BOUND: u32 = 24;

/// A Boolean literal: a variable index (starting at 1) and a polarity.
///
/// Encoded as `var << 1 | negated`, so sorting literals groups them by variable
/// with the positive literal first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal(u32);

impl Literal {
    pub fn new(var: u32, positive: bool) -> Self {
        assert!(var >= 1, "variable indices start at 1");
        Literal((var << 1) | u32::from(!positive))
    }

    pub fn positive(var: u32) -> Self {
        Self::new(var, true)
    }

    pub fn negative(var: u32) -> Self {
        Self::new(var, false)
    }

    /// Reads a signed DIMACS literal. Returns `None` for `0`.
    pub fn from_dimacs(lit: i32) -> Option<Self> {
        if lit == 0 {
            None
        } else {
            Some(Self::new(lit.unsigned_abs(), lit > 0))
        }
    }

    pub fn to_dimacs(self) -> i32 {
        let v = self.var() as i32;
        if self.is_positive() {
            v
        } else {
            -v
        }
    }

    pub fn var(self) -> u32 {
        self.0 >> 1
    }

    pub fn is_positive(self) -> bool {
        self.0 & 1 == 0
    }

    pub fn negated(self) -> Self {
        Literal(self.0 ^ 1)
    }
}

impl Not for Literal {
    type Output = Literal;

    fn not(self) -> Literal {
        self.negated()
    }
}

impl fmt::Debug for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dimacs())
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dimacs())
    }
}

/// A disjunction of literals with no duplicates and no complementary pair.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Clause(SmallVec<[Literal; 4]>);

impl Clause {
    /// Builds a clause, removing duplicate literals. Returns `None` if the
    /// literals contain a complementary pair (a tautology).
    pub fn new<I: IntoIterator<Item = Literal>>(lits: I) -> Option<Self> {
        let mut lits: SmallVec<[Literal; 4]> = lits.into_iter().collect();
        lits.sort_unstable();
        lits.dedup();
        if lits.windows(2).any(|w| w[0].var() == w[1].var()) {
            return None;
        }
        Some(Clause(lits))
    }

    /// Convenience constructor from signed DIMACS integers.
    pub fn from_dimacs(lits: &[i32]) -> Option<Self> {
        Self::new(lits.iter().filter_map(|&l| Literal::from_dimacs(l)))
    }

    pub fn literals(&self) -> &[Literal] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, lit: Literal) -> bool {
        self.0.contains(&lit)
    }

    fn remove(&mut self, lit: Literal) {
        if let Some(pos) = self.0.iter().position(|&l| l == lit) {
            self.0.remove(pos);
        }
    }
}

/// Identity of a formula: a digest of its variable count and clause sequence.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId([u8; 16]);

impl fmt::Debug for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InstanceId({})", hex::encode(self.0))
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CnfError {
    #[error("variable {var} exceeds declared variable count {num_vars}")]
    VariableOutOfRange { var: u32, num_vars: u32 },
    #[error("brute-force oracle refuses {vars} variables (bound is {bound})")]
    OracleBound { vars: u32, bound: u32 },
}

/// An immutable CNF instance. Clause order is kept as given.
#[derive(Clone, PartialEq, Eq)]
pub struct Formula {
    num_vars: u32,
    clauses: Vec<Clause>,
    id: InstanceId,
}

impl Formula {
    pub fn new(num_vars: u32, clauses: Vec<Clause>) -> Result<Self, CnfError> {
        for clause in &clauses {
            for lit in clause.literals() {
                if lit.var() > num_vars {
                    return Err(CnfError::VariableOutOfRange {
                        var: lit.var(),
                        num_vars,
                    });
                }
            }
        }
        let id = Self::digest(num_vars, &clauses);
        Ok(Formula { num_vars, clauses, id })
    }

    /// Builds a formula from signed DIMACS clauses, dropping tautologies.
    pub fn from_dimacs_clauses(num_vars: u32, clauses: &[&[i32]]) -> Result<Self, CnfError> {
        let clauses = clauses.iter().filter_map(|c| Clause::from_dimacs(c)).collect();
        Self::new(num_vars, clauses)
    }

    fn digest(num_vars: u32, clauses: &[Clause]) -> InstanceId {
        let mut hasher = Sha256::new();
        hasher.update(b"cnf");
        hasher.update(num_vars.to_le_bytes());
        for clause in clauses {
            for lit in clause.literals() {
                hasher.update(lit.to_dimacs().to_le_bytes());
            }
            hasher.update(0i32.to_le_bytes());
        }
        let out = hasher.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&out[..16]);
        InstanceId(id)
    }

    pub fn num_vars(&self) -> u32 {
        self.num_vars
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }
}

impl fmt::Debug for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Formula")
            .field("num_vars", &self.num_vars)
            .field("clauses", &self.clauses)
            .finish()
    }
}

/// Order-independent fingerprint of a search state.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey([u8; 16]);

impl StateKey {
    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 16] = bytes.try_into().ok()?;
        Some(StateKey(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight bytes as an integer, used to derive per-state seeds.
    pub fn low_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }
}

impl fmt::Debug for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateKey({})", self.to_hex())
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for StateKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for StateKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        StateKey::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid state key"))
    }
}

/// Simplification settings applied by every transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationOptions {
    pub pure_literals: bool,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions { pure_literals: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Conflict,
    Satisfied,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransitionError {
    #[error("cannot branch from a {0:?} state")]
    NotOpen(Status),
    #[error("variable {0} is already assigned")]
    AlreadyAssigned(u32),
    #[error("variable {var} exceeds declared variable count {num_vars}")]
    OutOfRange { var: u32, num_vars: u32 },
}

/// The tree-MDP state: residual clauses plus the assignment trail.
#[derive(Clone)]
pub struct SubproblemState {
    formula: Arc<Formula>,
    residual: Vec<Clause>,
    assignment: Vec<Option<bool>>,
    num_assigned: usize,
    decisions: Vec<Literal>,
    status: Status,
    options: PropagationOptions,
}

impl SubproblemState {
    /// The formula as given, before any propagation.
    pub fn unsimplified(formula: Arc<Formula>, options: PropagationOptions) -> Self {
        let residual = formula.clauses().to_vec();
        let status = Self::status_of(&residual);
        SubproblemState {
            assignment: vec![None; formula.num_vars() as usize + 1],
            formula,
            residual,
            num_assigned: 0,
            decisions: Vec::new(),
            status,
            options,
        }
    }

    /// The root of the DPLL tree: the formula after propagation with no decisions.
    pub fn root(formula: Arc<Formula>, options: PropagationOptions) -> Self {
        Self::unsimplified(formula, options).simplify()
    }

    fn status_of(residual: &[Clause]) -> Status {
        if residual.iter().any(Clause::is_empty) {
            Status::Conflict
        } else if residual.is_empty() {
            Status::Satisfied
        } else {
            Status::Open
        }
    }

    fn assign(&mut self, lit: Literal) {
        let var = lit.var() as usize;
        debug_assert!(self.assignment[var].is_none());
        self.assignment[var] = Some(lit.is_positive());
        self.num_assigned += 1;
        let falsified = lit.negated();
        let mut conflict = false;
        self.residual.retain_mut(|c| {
            if c.contains(lit) {
                return false;
            }
            c.remove(falsified);
            conflict |= c.is_empty();
            true
        });
        self.status = if conflict {
            Status::Conflict
        } else if self.residual.is_empty() {
            Status::Satisfied
        } else {
            Status::Open
        };
    }

    /// Assigns unit-clause literals until none remain or a conflict appears.
    pub fn unit_propagate(mut self) -> Self {
        while self.status == Status::Open {
            let unit = self.residual.iter().find(|c| c.len() == 1).map(|c| c.literals()[0]);
            match unit {
                Some(lit) => self.assign(lit),
                None => break,
            }
        }
        self
    }

    fn assign_pure_literals(&mut self) -> bool {
        // bit 0: seen positive, bit 1: seen negative
        let mut seen = vec![0u8; self.assignment.len()];
        for clause in &self.residual {
            for lit in clause.literals() {
                seen[lit.var() as usize] |= if lit.is_positive() { 1 } else { 2 };
            }
        }
        let pures: Vec<Literal> = seen
            .iter()
            .enumerate()
            .filter_map(|(v, &mask)| match mask {
                1 => Some(Literal::positive(v as u32)),
                2 => Some(Literal::negative(v as u32)),
                _ => None,
            })
            .collect();
        for &lit in &pures {
            self.assign(lit);
        }
        !pures.is_empty()
    }

    /// Assigns every pure literal, interleaved with unit propagation, until
    /// neither applies.
    pub fn pure_literal_eliminate(mut self) -> Self {
        while self.status == Status::Open && self.assign_pure_literals() {
            self = self.unit_propagate();
        }
        self
    }

    fn simplify(self) -> Self {
        let state = self.unit_propagate();
        if state.options.pure_literals {
            state.pure_literal_eliminate()
        } else {
            state
        }
    }

    /// Branches on `decision`: assigns it, then propagates to a fixpoint.
    pub fn transition(&self, decision: Literal) -> Result<Self, TransitionError> {
        if self.status != Status::Open {
            return Err(TransitionError::NotOpen(self.status));
        }
        let var = decision.var();
        if var > self.formula.num_vars() {
            return Err(TransitionError::OutOfRange {
                var,
                num_vars: self.formula.num_vars(),
            });
        }
        if self.assignment[var as usize].is_some() {
            return Err(TransitionError::AlreadyAssigned(var));
        }
        let mut next = self.clone();
        next.decisions.push(decision);
        next.assign(decision);
        Ok(next.simplify())
    }

    /// Both children of branching on `var`, in `(false, true)` order.
    pub fn children(&self, var: u32) -> Result<(Self, Self), TransitionError> {
        Ok((
            self.transition(Literal::negative(var))?,
            self.transition(Literal::positive(var))?,
        ))
    }

    /// Key over the unordered decision set and the instance identity.
    pub fn key(&self) -> StateKey {
        let mut decisions = self.decisions.clone();
        decisions.sort_unstable();
        self.digest(b'D', &decisions)
    }

    /// Key over the ordered decision sequence; distinct for every tree path.
    pub fn path_key(&self) -> StateKey {
        self.digest(b'P', &self.decisions)
    }

    fn digest(&self, tag: u8, decisions: &[Literal]) -> StateKey {
        let mut hasher = Sha256::new();
        hasher.update(self.formula.id().0);
        hasher.update([tag, u8::from(self.options.pure_literals)]);
        for lit in decisions {
            hasher.update(lit.to_dimacs().to_le_bytes());
        }
        let out = hasher.finalize();
        let mut key = [0u8; 16];
        key.copy_from_slice(&out[..16]);
        StateKey(key)
    }

    pub fn formula(&self) -> &Arc<Formula> {
        &self.formula
    }

    pub fn residual(&self) -> &[Clause] {
        &self.residual
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_open(&self) -> bool {
        self.status == Status::Open
    }

    pub fn options(&self) -> PropagationOptions {
        self.options
    }

    pub fn decisions(&self) -> &[Literal] {
        &self.decisions
    }

    pub fn decision_depth(&self) -> usize {
        self.decisions.len()
    }

    pub fn value(&self, var: u32) -> Option<bool> {
        self.assignment.get(var as usize).copied().flatten()
    }

    pub fn num_assigned(&self) -> usize {
        self.num_assigned
    }

    /// Every assigned literal, decided or forced, in ascending order.
    pub fn assigned_literals(&self) -> Vec<Literal> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(v, a)| a.map(|pos| Literal::new(v as u32, pos)))
            .collect()
    }

    /// Branching candidates in ascending order: the variables occurring in the
    /// residual, or every unassigned variable when the residual is empty.
    pub fn candidate_vars(&self) -> Vec<u32> {
        if self.residual.is_empty() {
            return (1..self.assignment.len() as u32)
                .filter(|&v| self.assignment[v as usize].is_none())
                .collect();
        }
        let mut present = vec![false; self.assignment.len()];
        for clause in &self.residual {
            for lit in clause.literals() {
                present[lit.var() as usize] = true;
            }
        }
        present
            .iter()
            .enumerate()
            .filter_map(|(v, &p)| p.then_some(v as u32))
            .collect()
    }

    /// The residual as a standalone formula over the original variable numbering.
    pub fn residual_formula(&self) -> Formula {
        Formula::new(self.formula.num_vars(), self.residual.clone())
            .expect("residual literals are within the instance's variable range")
    }
}

impl fmt::Debug for SubproblemState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubproblemState")
            .field("status", &self.status)
            .field("decisions", &self.decisions)
            .field("residual", &self.residual)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Satisfiability {
    Satisfiable,
    Unsatisfiable,
}

/// Exhaustive truth-table check, refusing formulas over [`ORACLE_VAR_BOUND`] variables.
pub fn brute_force_sat(formula: &Formula) -> Result<Satisfiability, CnfError> {
    brute_force_sat_bounded(formula, ORACLE_VAR_BOUND)
}

pub fn brute_force_sat_bounded(formula: &Formula, bound: u32) -> Result<Satisfiability, CnfError> {
    let n = formula.num_vars();
    if n > bound || n > 31 {
        return Err(CnfError::OracleBound { vars: n, bound });
    }
    // per clause: bitmask of positive and of negative occurrences (bit i = variable i+1)
    let masks: Vec<(u32, u32)> = formula
        .clauses()
        .iter()
        .map(|c| {
            c.literals().iter().fold((0, 0), |(p, q), l| {
                let bit = 1u32 << (l.var() - 1);
                if l.is_positive() {
                    (p | bit, q)
                } else {
                    (p, q | bit)
                }
            })
        })
        .collect();
    let found =
        (0u32..(1u32 << n)).any(|assign| masks.iter().all(|&(pos, neg)| assign & pos != 0 || !assign & neg != 0));
    Ok(if found {
        Satisfiability::Satisfiable
    } else {
        Satisfiability::Unsatisfiable
    })
}
