//! Exact model counting: brute-force enumeration and a DPLL counter with
//! unit propagation.

use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::cnf::CnfFormula;

/// Largest formula `count_bruteforce` will enumerate.
pub const BRUTEFORCE_MAX_VARS: u32 = 26;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CountError {
    #[error("instance too large for enumeration: {n_vars} variables (max {max})")]
    TooLarge { n_vars: u32, max: u32 },
    #[error("model counting exceeded its time budget of {0:?}")]
    Timeout(Duration),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactCount {
    pub count: BigUint,
}

impl ExactCount {
    pub fn new(count: BigUint) -> Self {
        Self { count }
    }

    pub fn is_zero(&self) -> bool {
        self.count.is_zero()
    }

    /// Natural log of the count, or `None` when the formula is UNSAT.
    pub fn ln_count(&self) -> Option<f64> {
        ln_biguint(&self.count)
    }
}

/// `ln(n)` for arbitrarily large `n`, from the leading 64 bits and the
/// binary exponent.
pub fn ln_biguint(n: &BigUint) -> Option<f64> {
    if n.is_zero() {
        return None;
    }
    let bits = n.bits();
    if bits <= 64 {
        return Some((n.to_u64().unwrap() as f64).ln());
    }
    let shift = bits - 64;
    let top = (n >> shift).to_u64().unwrap();
    Some((top as f64).ln() + shift as f64 * std::f64::consts::LN_2)
}

/// Counts models by enumerating all `2^n` assignments.
pub fn count_bruteforce(formula: &CnfFormula) -> Result<ExactCount, CountError> {
    if formula.n_vars > BRUTEFORCE_MAX_VARS {
        return Err(CountError::TooLarge { n_vars: formula.n_vars, max: BRUTEFORCE_MAX_VARS });
    }
    // Per clause: bit set of positive and of negated variables.
    let masks: Vec<(u64, u64)> = formula
        .clauses
        .iter()
        .map(|c| {
            c.literals.iter().fold((0u64, 0u64), |(p, n), l| {
                let bit = 1u64 << (l.variable - 1);
                if l.negated {
                    (p, n | bit)
                } else {
                    (p | bit, n)
                }
            })
        })
        .collect();
    let total = 1u64 << formula.n_vars;
    let full = total - 1;
    let mut count = 0u64;
    for x in 0..total {
        let not_x = !x & full;
        if masks.iter().all(|&(p, n)| (x & p) != 0 || (not_x & n) != 0) {
            count += 1;
        }
    }
    Ok(ExactCount::new(BigUint::from(count)))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CountOptions {
    /// Wall-clock budget for a single count; `None` means unlimited.
    pub timeout: Option<Duration>,
}

impl CountOptions {
    pub fn with_timeout(timeout: Duration) -> Self {
        Self { timeout: Some(timeout) }
    }
}

const UNASSIGNED: i8 = -1;

struct Dpll<'a> {
    formula: &'a CnfFormula,
    assign: Vec<i8>,
    trail: Vec<usize>,
    deadline: Option<(Instant, Duration)>,
    nodes: u64,
    var_counts: Vec<u32>,
}

enum Propagation {
    Conflict,
    AllSatisfied,
    Open,
}

impl<'a> Dpll<'a> {
    fn new(formula: &'a CnfFormula, opts: CountOptions) -> Self {
        Self {
            formula,
            assign: vec![UNASSIGNED; formula.n_vars as usize],
            trail: Vec::new(),
            deadline: opts.timeout.map(|t| (Instant::now() + t, t)),
            nodes: 0,
            var_counts: vec![0; formula.n_vars as usize],
        }
    }

    fn check_time(&mut self) -> Result<(), CountError> {
        self.nodes += 1;
        if let Some((deadline, budget)) = self.deadline {
            if self.nodes % 256 == 1 && Instant::now() > deadline {
                return Err(CountError::Timeout(budget));
            }
        }
        Ok(())
    }

    fn set(&mut self, var: usize, value: bool) {
        self.assign[var] = value as i8;
        self.trail.push(var);
    }

    fn undo_to(&mut self, mark: usize) {
        while self.trail.len() > mark {
            let v = self.trail.pop().unwrap();
            self.assign[v] = UNASSIGNED;
        }
    }

    /// Unit propagation to fixpoint.
    fn propagate(&mut self) -> Propagation {
        let formula = self.formula;
        loop {
            let mut changed = false;
            let mut all_sat = true;
            for clause in &formula.clauses {
                let mut satisfied = false;
                let mut open = 0usize;
                let mut last = None;
                for lit in &clause.literals {
                    let v = (lit.variable - 1) as usize;
                    match self.assign[v] {
                        UNASSIGNED => {
                            open += 1;
                            last = Some(*lit);
                        }
                        val => {
                            if lit.is_satisfied_by(val == 1) {
                                satisfied = true;
                                break;
                            }
                        }
                    }
                }
                if satisfied {
                    continue;
                }
                all_sat = false;
                match (open, last) {
                    (0, _) => return Propagation::Conflict,
                    (1, Some(lit)) => {
                        let v = (lit.variable - 1) as usize;
                        // A repeated literal in the same clause may already be set.
                        if self.assign[v] == UNASSIGNED {
                            self.assign[v] = (!lit.negated) as i8;
                            self.trail.push(v);
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
            if all_sat {
                return Propagation::AllSatisfied;
            }
            if !changed {
                return Propagation::Open;
            }
        }
    }

    /// Most frequent unassigned variable over unsatisfied clauses; ties go to
    /// the lowest index.
    fn pick_branch_var(&mut self) -> usize {
        let formula = self.formula;
        self.var_counts.iter_mut().for_each(|c| *c = 0);
        for clause in &formula.clauses {
            let satisfied = clause.literals.iter().any(|l| {
                let a = self.assign[(l.variable - 1) as usize];
                a != UNASSIGNED && l.is_satisfied_by(a == 1)
            });
            if satisfied {
                continue;
            }
            for l in &clause.literals {
                let v = (l.variable - 1) as usize;
                if self.assign[v] == UNASSIGNED {
                    self.var_counts[v] += 1;
                }
            }
        }
        let mut best = usize::MAX;
        let mut best_count = 0;
        for (v, &c) in self.var_counts.iter().enumerate() {
            if c > best_count {
                best = v;
                best_count = c;
            }
        }
        debug_assert!(best != usize::MAX, "open formula must have an unassigned variable");
        best
    }

    fn free_vars(&self) -> usize {
        self.assign.len() - self.trail.len()
    }

    fn count(&mut self) -> Result<BigUint, CountError> {
        self.check_time()?;
        let mark = self.trail.len();
        let result = match self.propagate() {
            Propagation::Conflict => BigUint::zero(),
            Propagation::AllSatisfied => BigUint::one() << self.free_vars(),
            Propagation::Open => {
                let var = self.pick_branch_var();
                let mut total = BigUint::zero();
                for value in [false, true] {
                    let inner = self.trail.len();
                    self.set(var, value);
                    total += self.count()?;
                    self.undo_to(inner);
                }
                total
            }
        };
        self.undo_to(mark);
        Ok(result)
    }

    fn satisfiable(&mut self) -> Result<bool, CountError> {
        self.check_time()?;
        let mark = self.trail.len();
        let result = match self.propagate() {
            Propagation::Conflict => false,
            Propagation::AllSatisfied => true,
            Propagation::Open => {
                let var = self.pick_branch_var();
                let mut found = false;
                for value in [true, false] {
                    let inner = self.trail.len();
                    self.set(var, value);
                    found = self.satisfiable()?;
                    self.undo_to(inner);
                    if found {
                        break;
                    }
                }
                found
            }
        };
        self.undo_to(mark);
        Ok(result)
    }
}

/// Exact model count by DPLL search with unit propagation.
pub fn count_dpll(formula: &CnfFormula) -> Result<ExactCount, CountError> {
    count_dpll_with(formula, CountOptions::default())
}

pub fn count_dpll_with(formula: &CnfFormula, opts: CountOptions) -> Result<ExactCount, CountError> {
    let mut solver = Dpll::new(formula, opts);
    solver.count().map(ExactCount::new)
}

pub fn is_satisfiable(formula: &CnfFormula) -> Result<bool, CountError> {
    is_satisfiable_with(formula, CountOptions::default())
}

pub fn is_satisfiable_with(formula: &CnfFormula, opts: CountOptions) -> Result<bool, CountError> {
    Dpll::new(formula, opts).satisfiable()
}
