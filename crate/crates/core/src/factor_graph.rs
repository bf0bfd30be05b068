//! Clause factor graphs with log-domain 0/1 factor tables.
//!
//! Edges are numbered factor-major: the edges of factor `j` are the
//! contiguous range `edge_offsets[j]..edge_offsets[j + 1]`, one per slot.
//! Slot `s` of a factor is bit `s` of its table index, with bit value 0
//! meaning "false".

use thiserror::Error;

use crate::cnf::CnfFormula;
use crate::math::log_sum_exp;

/// Stand-in for `ln 0` in factor tables. Finite so that every log-sum-exp
/// and every gradient through it stays finite; `e^-100` is ~3.7e-44.
pub const NEG_SENTINEL: f64 = -100.0;

/// Largest formula `partition_bruteforce` will enumerate.
pub const PARTITION_MAX_VARS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FactorGraphError {
    #[error("clause {0} is empty")]
    EmptyClause(usize),
    #[error("clause {clause} mentions variable {variable} more than once")]
    RepeatedVariable { clause: usize, variable: u32 },
    #[error("variable {variable} out of range for {n_vars} variables")]
    VariableOutOfRange { variable: u32, n_vars: u32 },
    #[error("instance too large for enumeration: {n_vars} variables (max {max})")]
    TooLarge { n_vars: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    /// 0-based variable per slot.
    pub var_ids: Vec<usize>,
    /// `2^arity` entries: 0.0 for satisfying assignments, `NEG_SENTINEL` for
    /// the falsifying one.
    pub log_table: Vec<f64>,
}

impl Factor {
    pub fn arity(&self) -> usize {
        self.var_ids.len()
    }

    pub fn table_len(&self) -> usize {
        self.log_table.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub n_vars: usize,
    pub factors: Vec<Factor>,
    /// Per variable, `(factor, slot)` pairs in increasing factor order.
    pub var_adjacency: Vec<Vec<(usize, usize)>>,
    /// Per variable, ids of its incident edges (parallel to `var_adjacency`).
    pub var_edges: Vec<Vec<usize>>,
    pub edge_offsets: Vec<usize>,
    pub edge_var: Vec<usize>,
    pub edge_factor: Vec<usize>,
    pub edge_slot: Vec<usize>,
    pub table_offsets: Vec<usize>,
}

impl FactorGraph {
    pub fn from_cnf(formula: &CnfFormula) -> Result<Self, FactorGraphError> {
        let n_vars = formula.n_vars as usize;
        let mut factors = Vec::with_capacity(formula.n_clauses());
        for (j, clause) in formula.clauses.iter().enumerate() {
            if clause.is_empty() {
                return Err(FactorGraphError::EmptyClause(j));
            }
            let mut var_ids = Vec::with_capacity(clause.len());
            let mut falsifying = 0usize;
            for (slot, lit) in clause.literals.iter().enumerate() {
                if lit.variable == 0 || lit.variable > formula.n_vars {
                    return Err(FactorGraphError::VariableOutOfRange {
                        variable: lit.variable,
                        n_vars: formula.n_vars,
                    });
                }
                let v = (lit.variable - 1) as usize;
                if var_ids.contains(&v) {
                    return Err(FactorGraphError::RepeatedVariable { clause: j, variable: lit.variable });
                }
                var_ids.push(v);
                // A negated literal is false when its variable is true.
                if lit.negated {
                    falsifying |= 1 << slot;
                }
            }
            let mut log_table = vec![0.0; 1 << var_ids.len()];
            log_table[falsifying] = NEG_SENTINEL;
            factors.push(Factor { var_ids, log_table });
        }
        Ok(Self::from_factors(n_vars, factors))
    }

    pub fn from_factors(n_vars: usize, factors: Vec<Factor>) -> Self {
        let mut var_adjacency = vec![Vec::new(); n_vars];
        let mut var_edges = vec![Vec::new(); n_vars];
        let mut edge_offsets = Vec::with_capacity(factors.len() + 1);
        let mut table_offsets = Vec::with_capacity(factors.len() + 1);
        let mut edge_var = Vec::new();
        let mut edge_factor = Vec::new();
        let mut edge_slot = Vec::new();
        let mut table_total = 0;
        for (j, f) in factors.iter().enumerate() {
            edge_offsets.push(edge_var.len());
            table_offsets.push(table_total);
            table_total += f.table_len();
            for (slot, &v) in f.var_ids.iter().enumerate() {
                var_adjacency[v].push((j, slot));
                var_edges[v].push(edge_var.len());
                edge_var.push(v);
                edge_factor.push(j);
                edge_slot.push(slot);
            }
        }
        edge_offsets.push(edge_var.len());
        table_offsets.push(table_total);
        Self {
            n_vars,
            factors,
            var_adjacency,
            var_edges,
            edge_offsets,
            edge_var,
            edge_factor,
            edge_slot,
            table_offsets,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_var.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.var_adjacency[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.var_adjacency.iter().map(Vec::len).collect()
    }

    pub fn factor_edges(&self, j: usize) -> std::ops::Range<usize> {
        self.edge_offsets[j]..self.edge_offsets[j + 1]
    }

    pub fn total_table_len(&self) -> usize {
        *self.table_offsets.last().unwrap()
    }

    /// True iff every connected component of the bipartite graph is acyclic.
    pub fn is_tree(&self) -> bool {
        let nodes = self.n_vars + self.n_factors();
        let mut parent: Vec<usize> = (0..nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in 0..self.n_edges() {
            let a = find(&mut parent, self.edge_var[e]);
            let b = find(&mut parent, self.n_vars + self.edge_factor[e]);
            if a == b {
                return false;
            }
            parent[a] = b;
        }
        true
    }
}

/// `out[x] = LSE over local assignments a with a[slot] = x of
/// (log_table[a] + sum over other slots s of msgs[s][a[s]])`.
/// `msgs[slot]` is ignored.
pub fn lse_marginal(log_table: &[f64], slot: usize, msgs: &[[f64; 2]]) -> [f64; 2] {
    let k = msgs.len();
    debug_assert_eq!(log_table.len(), 1 << k);
    let mut terms: [Vec<f64>; 2] = [Vec::with_capacity(1 << (k - 1)), Vec::with_capacity(1 << (k - 1))];
    for (a, &t) in log_table.iter().enumerate() {
        let mut acc = t;
        for (s, m) in msgs.iter().enumerate() {
            if s != slot {
                acc += m[(a >> s) & 1];
            }
        }
        terms[(a >> slot) & 1].push(acc);
    }
    [log_sum_exp(&terms[0]), log_sum_exp(&terms[1])]
}

/// Vector-Jacobian product of [`lse_marginal`]: adds `d out / d msgs`
/// contracted with `grad_out` into `grad_msgs`.
pub fn lse_marginal_backward(
    log_table: &[f64],
    slot: usize,
    msgs: &[[f64; 2]],
    out: [f64; 2],
    grad_out: [f64; 2],
    grad_msgs: &mut [[f64; 2]],
) {
    for (a, &t) in log_table.iter().enumerate() {
        let mut acc = t;
        for (s, m) in msgs.iter().enumerate() {
            if s != slot {
                acc += m[(a >> s) & 1];
            }
        }
        let y = (a >> slot) & 1;
        let w = grad_out[y] * (acc - out[y]).exp();
        if w == 0.0 {
            continue;
        }
        for (s, g) in grad_msgs.iter_mut().enumerate() {
            if s != slot {
                g[(a >> s) & 1] += w;
            }
        }
    }
}

/// `ln Z` by enumerating every assignment.
pub fn partition_bruteforce(fg: &FactorGraph) -> Result<f64, FactorGraphError> {
    if fg.n_vars > PARTITION_MAX_VARS {
        return Err(FactorGraphError::TooLarge { n_vars: fg.n_vars, max: PARTITION_MAX_VARS });
    }
    let total = 1usize << fg.n_vars;
    let mut terms = Vec::with_capacity(total);
    for x in 0..total {
        let mut logw = 0.0;
        for f in &fg.factors {
            let mut idx = 0;
            for (s, &v) in f.var_ids.iter().enumerate() {
                idx |= ((x >> v) & 1) << s;
            }
            logw += f.log_table[idx];
        }
        terms.push(logw);
    }
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{Clause, CnfFormula};

    fn fg(n: u32, clauses: &[&[i64]]) -> FactorGraph {
        FactorGraph::from_cnf(&CnfFormula::from_dimacs_clauses(n, clauses)).unwrap()
    }

    #[test]
    fn binary_clause_table() {
        let g = fg(2, &[&[1, 2]]);
        assert_eq!(g.factors[0].var_ids, vec![0, 1]);
        assert_eq!(g.factors[0].log_table, vec![NEG_SENTINEL, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_negative_clause_table() {
        let g = fg(1, &[&[-1]]);
        assert_eq!(g.factors[0].log_table, vec![0.0, NEG_SENTINEL]);
    }

    #[test]
    fn mixed_clause_falsifier() {
        let g = fg(3, &[&[1, -2, 3]]);
        // (x1, x2, x3) = (0, 1, 0) -> index 0b010.
        let t = &g.factors[0].log_table;
        assert_eq!(t[0b010], NEG_SENTINEL);
        assert_eq!(t.iter().filter(|&&v| v == NEG_SENTINEL).count(), 1);
    }

    #[test]
    fn rejects_malformed_clauses() {
        let empty = CnfFormula::new(2, vec![Clause::default()]);
        assert_eq!(FactorGraph::from_cnf(&empty), Err(FactorGraphError::EmptyClause(0)));
        let rep = CnfFormula::from_dimacs_clauses(2, &[&[1, -1]]);
        assert!(matches!(FactorGraph::from_cnf(&rep), Err(FactorGraphError::RepeatedVariable { .. })));
    }

    #[test]
    fn degrees_and_edges_consistent() {
        let g = fg(4, &[&[1, 2, 3], &[-2, 3], &[1]]);
        assert_eq!(g.n_edges(), 6);
        assert_eq!(g.degrees(), vec![2, 2, 2, 0]);
        assert_eq!(g.degrees().iter().sum::<usize>(), g.factors.iter().map(Factor::arity).sum::<usize>());
        for e in 0..g.n_edges() {
            let j = g.edge_factor[e];
            assert_eq!(g.factors[j].var_ids[g.edge_slot[e]], g.edge_var[e]);
            assert!(g.factor_edges(j).contains(&e));
        }
        assert_eq!(g.var_edges[1], vec![1, 3]);
    }

    #[test]
    fn partition_examples() {
        assert!((partition_bruteforce(&fg(2, &[&[1, 2]])).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((partition_bruteforce(&fg(3, &[&[1, 2], &[-2, 3]])).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((partition_bruteforce(&fg(3, &[])).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert!(partition_bruteforce(&FactorGraph::from_factors(21, vec![])).is_err());
    }

    #[test]
    fn tree_detection() {
        assert!(fg(3, &[&[1, 2, 3]]).is_tree());
        assert!(fg(3, &[&[1, 2], &[2, 3]]).is_tree());
        assert!(!fg(3, &[&[1, 2], &[2, 3], &[3, 1]]).is_tree());
        // Two clauses sharing two variables form a 4-cycle.
        assert!(!fg(2, &[&[1, 2], &[-1, -2]]).is_tree());
    }

    #[test]
    fn lse_marginal_matches_direct_sum() {
        let g = fg(3, &[&[1, -2, 3]]);
        let table = &g.factors[0].log_table;
        let msgs = [[-0.3, -1.2], [-2.0, -0.1], [-0.7, -0.7]];
        for slot in 0..3 {
            let out = lse_marginal(table, slot, &msgs);
            for (x, got) in out.iter().enumerate() {
                let mut sum = 0.0;
                for a in 0..8usize {
                    if (a >> slot) & 1 != x {
                        continue;
                    }
                    let mut w = table[a];
                    for (s, m) in msgs.iter().enumerate() {
                        if s != slot {
                            w += m[(a >> s) & 1];
                        }
                    }
                    sum += w.exp();
                }
                assert!((got - sum.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lse_marginal_backward_matches_finite_differences() {
        let table = fg(3, &[&[1, -2, 3]]).factors[0].log_table.clone();
        let msgs = [[-0.3, -1.2], [-2.0, -0.1], [-0.7, -0.4]];
        let slot = 1;
        let gout = [0.6, -1.3];
        let out = lse_marginal(&table, slot, &msgs);
        let mut grad = [[0.0; 2]; 3];
        lse_marginal_backward(&table, slot, &msgs, out, gout, &mut grad);
        let eps = 1e-6;
        for s in 0..3 {
            for x in 0..2 {
                let mut p = msgs;
                p[s][x] += eps;
                let mut m = msgs;
                m[s][x] -= eps;
                let fp = lse_marginal(&table, slot, &p);
                let fm = lse_marginal(&table, slot, &m);
                let fd = (gout[0] * (fp[0] - fm[0]) + gout[1] * (fp[1] - fm[1])) / (2.0 * eps);
                assert!((fd - grad[s][x]).abs() < 1e-8, "slot {s} x {x}: {fd} vs {}", grad[s][x]);
            }
        }
    }
}
