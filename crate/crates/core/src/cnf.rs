//! CNF formulae and the DIMACS CNF exchange format.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// A possibly negated occurrence of a variable. Variables are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    pub variable: u32,
    pub negated: bool,
}

impl Literal {
    pub fn new(variable: u32, negated: bool) -> Self {
        debug_assert!(variable >= 1);
        Self { variable, negated }
    }

    pub fn pos(variable: u32) -> Self {
        Self::new(variable, false)
    }

    pub fn neg(variable: u32) -> Self {
        Self::new(variable, true)
    }

    /// Builds a literal from a signed DIMACS integer. Zero is rejected.
    pub fn from_dimacs(value: i64) -> Option<Self> {
        if value == 0 || value.unsigned_abs() > u32::MAX as u64 {
            return None;
        }
        Some(Self::new(value.unsigned_abs() as u32, value < 0))
    }

    pub fn to_dimacs(self) -> i64 {
        if self.negated {
            -(self.variable as i64)
        } else {
            self.variable as i64
        }
    }

    /// Whether the literal is true when its variable takes `value`.
    #[inline]
    pub fn is_satisfied_by(self, value: bool) -> bool {
        value != self.negated
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dimacs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Clause {
    pub literals: Vec<Literal>,
}

impl Clause {
    pub fn new(literals: Vec<Literal>) -> Self {
        Self { literals }
    }

    pub fn from_dimacs(values: &[i64]) -> Self {
        Self::new(values.iter().filter_map(|&v| Literal::from_dimacs(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.literals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    pub fn is_tautology(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.literals.len());
        for lit in &self.literals {
            seen.insert(*lit);
        }
        self.literals.iter().any(|l| seen.contains(&Literal::new(l.variable, !l.negated)))
    }

    /// Literal set in canonical (sorted, deduplicated) order; two clauses are
    /// the same clause iff their keys are equal.
    pub fn key(&self) -> Vec<Literal> {
        let mut lits = self.literals.clone();
        lits.sort_unstable();
        lits.dedup();
        lits
    }

    /// Evaluates the clause under a full assignment indexed by `variable - 1`.
    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        self.literals.iter().any(|l| l.is_satisfied_by(assignment[(l.variable - 1) as usize]))
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for lit in &self.literals {
            write!(f, "{} ", lit)?;
        }
        write!(f, "0")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CnfFormula {
    pub n_vars: u32,
    pub clauses: Vec<Clause>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CnfError {
    #[error("missing `p cnf` header")]
    MissingHeader,
    #[error("line {line}: malformed header `{text}`")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: duplicate header")]
    DuplicateHeader { line: usize },
    #[error("line {line}: invalid token `{token}`")]
    InvalidToken { line: usize, token: String },
    #[error("line {line}: literal {literal} out of declared range 1..={n_vars}")]
    LiteralOutOfRange { line: usize, literal: i64, n_vars: u32 },
    #[error("last clause is not terminated by 0")]
    UnterminatedClause,
    #[error("header declares {declared} clauses but {found} were read")]
    ClauseCountMismatch { declared: usize, found: usize },
    #[error("literal references variable {variable} but formula has {n_vars} variables")]
    InvalidVariable { variable: u32, n_vars: u32 },
}

impl CnfFormula {
    pub fn new(n_vars: u32, clauses: Vec<Clause>) -> Self {
        Self { n_vars, clauses }
    }

    /// Convenience constructor from signed DIMACS integers per clause.
    pub fn from_dimacs_clauses(n_vars: u32, clauses: &[&[i64]]) -> Self {
        Self::new(n_vars, clauses.iter().map(|c| Clause::from_dimacs(c)).collect())
    }

    pub fn n_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn has_empty_clause(&self) -> bool {
        self.clauses.iter().any(Clause::is_empty)
    }

    pub fn validate(&self) -> Result<(), CnfError> {
        for lit in self.clauses.iter().flat_map(|c| &c.literals) {
            if lit.variable == 0 || lit.variable > self.n_vars {
                return Err(CnfError::InvalidVariable { variable: lit.variable, n_vars: self.n_vars });
            }
        }
        Ok(())
    }

    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        self.clauses.iter().all(|c| c.is_satisfied_by(assignment))
    }

    /// Merges duplicate literals, drops tautologies and drops repeated clauses.
    /// The first occurrence of each clause is kept, in input order, with its
    /// literals in first-occurrence order.
    pub fn normalize(&self) -> CnfFormula {
        let mut seen: HashSet<Vec<Literal>> = HashSet::with_capacity(self.clauses.len());
        let mut clauses = Vec::with_capacity(self.clauses.len());
        for clause in &self.clauses {
            if clause.is_tautology() {
                continue;
            }
            let mut lits = Vec::with_capacity(clause.len());
            for lit in &clause.literals {
                if !lits.contains(lit) {
                    lits.push(*lit);
                }
            }
            let clause = Clause::new(lits);
            if seen.insert(clause.key()) {
                clauses.push(clause);
            }
        }
        CnfFormula::new(self.n_vars, clauses)
    }

    /// Renames variables by `perm[old - 1] = new` and reorders clauses so that
    /// output clause `c` is input clause `clause_order[c]`.
    pub fn relabel(&self, perm: &[u32], clause_order: &[usize]) -> CnfFormula {
        assert_eq!(perm.len(), self.n_vars as usize);
        assert_eq!(clause_order.len(), self.clauses.len());
        let clauses = clause_order
            .iter()
            .map(|&c| {
                Clause::new(
                    self.clauses[c]
                        .literals
                        .iter()
                        .map(|l| Literal::new(perm[(l.variable - 1) as usize], l.negated))
                        .collect(),
                )
            })
            .collect();
        CnfFormula::new(self.n_vars, clauses)
    }

    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.n_vars, self.clauses.len());
        for clause in &self.clauses {
            for lit in &clause.literals {
                out.push_str(&lit.to_dimacs().to_string());
                out.push(' ');
            }
            out.push_str("0\n");
        }
        out
    }
}

pub fn write_dimacs(formula: &CnfFormula) -> String {
    formula.to_dimacs()
}

/// Parses DIMACS CNF. Clauses may span lines; `%` ends the clause section
/// (SATLIB convention).
pub fn parse_dimacs(text: &str) -> Result<CnfFormula, CnfError> {
    let mut header: Option<(u32, usize)> = None;
    let mut clauses = Vec::new();
    let mut current: Vec<Literal> = Vec::new();

    'lines: for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if line.starts_with('p') {
            if header.is_some() {
                return Err(CnfError::DuplicateHeader { line: line_no });
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let malformed = || CnfError::MalformedHeader { line: line_no, text: line.to_string() };
            if parts.len() != 4 || parts[0] != "p" || parts[1] != "cnf" {
                return Err(malformed());
            }
            let n_vars: u32 = parts[2].parse().map_err(|_| malformed())?;
            let n_clauses: usize = parts[3].parse().map_err(|_| malformed())?;
            header = Some((n_vars, n_clauses));
            continue;
        }
        let Some((n_vars, _)) = header else {
            return Err(CnfError::MissingHeader);
        };
        for token in line.split_whitespace() {
            if token == "%" {
                break 'lines;
            }
            let value: i64 =
                token.parse().map_err(|_| CnfError::InvalidToken { line: line_no, token: token.to_string() })?;
            if value == 0 {
                clauses.push(Clause::new(std::mem::take(&mut current)));
                continue;
            }
            if value.unsigned_abs() > n_vars as u64 {
                return Err(CnfError::LiteralOutOfRange { line: line_no, literal: value, n_vars });
            }
            current.push(Literal::new(value.unsigned_abs() as u32, value < 0));
        }
    }

    let (n_vars, declared) = header.ok_or(CnfError::MissingHeader)?;
    if !current.is_empty() {
        return Err(CnfError::UnterminatedClause);
    }
    if clauses.len() != declared {
        return Err(CnfError::ClauseCountMismatch { declared, found: clauses.len() });
    }
    Ok(CnfFormula::new(n_vars, clauses))
}
