//! DIMACS CNF reading and writing.
//!
//! The reader accepts `c` comment lines, a single `p cnf <vars> <clauses>`
//! header and zero-terminated clauses (a clause may span lines). A line
//! starting with `%` ends the input, as in the SATLIB distributions.

use std::fmt::Write as _;
use std::io::{self, Read};

use thiserror::Error;

use crate::cnf::{Clause, Formula, Literal};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DimacsErrorKind {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("clause data before the `p cnf` header")]
    MissingHeader,
    #[error("duplicate header")]
    DuplicateHeader,
    #[error("invalid literal token `{0}`")]
    InvalidToken(String),
    #[error("variable index {var} out of range (declared {num_vars})")]
    VariableOutOfRange { var: u32, num_vars: u32 },
    #[error("clause is missing its terminating 0")]
    MissingTerminator,
    #[error("header declares {declared} clauses but {found} were read")]
    ClauseCountMismatch { declared: usize, found: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("DIMACS parse error at line {line}: {kind}")]
pub struct DimacsError {
    pub line: usize,
    pub kind: DimacsErrorKind,
}

fn err(line: usize, kind: DimacsErrorKind) -> DimacsError {
    DimacsError { line, kind }
}

/// Parses DIMACS text. Duplicate literals are merged and tautological
/// clauses dropped; the header's clause count is checked against the
/// clauses as written, before tautologies are removed.
pub fn parse_dimacs(text: &str) -> Result<Formula, DimacsError> {
    let mut header: Option<(u32, usize)> = None;
    let mut clauses = Vec::new();
    let mut written = 0usize;
    let mut current: Vec<Literal> = Vec::new();
    let mut open_line = 0usize;
    let mut last_line = 0usize;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('c') {
            continue;
        }
        if trimmed.starts_with('%') {
            break;
        }
        if trimmed.starts_with('p') {
            if header.is_some() {
                return Err(err(lineno, DimacsErrorKind::DuplicateHeader));
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let malformed = || err(lineno, DimacsErrorKind::MalformedHeader(trimmed.to_string()));
            if fields.len() != 4 || fields[0] != "p" || fields[1] != "cnf" {
                return Err(malformed());
            }
            let vars = fields[2].parse::<u32>().map_err(|_| malformed())?;
            let count = fields[3].parse::<usize>().map_err(|_| malformed())?;
            header = Some((vars, count));
            continue;
        }
        let Some((num_vars, _)) = header else {
            return Err(err(lineno, DimacsErrorKind::MissingHeader));
        };
        for token in trimmed.split_whitespace() {
            let value: i32 = token
                .parse()
                .map_err(|_| err(lineno, DimacsErrorKind::InvalidToken(token.to_string())))?;
            match Literal::from_dimacs(value) {
                None => {
                    written += 1;
                    if let Some(clause) = Clause::new(current.drain(..)) {
                        clauses.push(clause);
                    }
                }
                Some(lit) => {
                    if lit.var() > num_vars {
                        return Err(err(
                            lineno,
                            DimacsErrorKind::VariableOutOfRange {
                                var: lit.var(),
                                num_vars,
                            },
                        ));
                    }
                    if current.is_empty() {
                        open_line = lineno;
                    }
                    current.push(lit);
                }
            }
        }
    }

    let Some((num_vars, declared)) = header else {
        return Err(err(last_line.max(1), DimacsErrorKind::MissingHeader));
    };
    if !current.is_empty() {
        return Err(err(open_line, DimacsErrorKind::MissingTerminator));
    }
    if written != declared {
        return Err(err(
            last_line.max(1),
            DimacsErrorKind::ClauseCountMismatch {
                declared,
                found: written,
            },
        ));
    }
    Ok(Formula::new(num_vars, clauses).expect("literals were range-checked while parsing"))
}

pub fn read_dimacs<R: Read>(mut reader: R) -> io::Result<Result<Formula, DimacsError>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    Ok(parse_dimacs(&text))
}

/// Renders a formula as DIMACS: header, one clause per line, `\n` endings.
pub fn write_dimacs(formula: &Formula) -> String {
    write_dimacs_with_comments(formula, &[])
}

pub fn write_dimacs_with_comments(formula: &Formula, comments: &[&str]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "c {c}");
    }
    let _ = writeln!(out, "p cnf {} {}", formula.num_vars(), formula.num_clauses());
    for clause in formula.clauses() {
        for lit in clause.literals() {
            let _ = write!(out, "{} ", lit.to_dimacs());
        }
        out.push_str("0\n");
    }
    out
}
