//! Index structures the model needs on top of a [`FactorGraph`].
//!
//! Message rows are indexed by edge id in both directions. A "pair" couples a
//! target message with one message feeding into it:
//!
//! * variable-to-factor target `i -> j` pairs with every incoming
//!   factor-to-variable message `j' -> i`, `j' != j`;
//! * factor-to-variable target `j -> i` pairs with every incoming
//!   variable-to-factor message `i' -> j`, `i' != i`, in slot order.
//!
//! Pairs are sorted by target so they can be grouped with segment ops.

use std::sync::Arc;

use crate::cnf::CnfFormula;
use crate::diff::{Index, Tensor};
use crate::factor_graph::{FactorGraph, FactorGraphError};

#[derive(Debug, Clone)]
pub struct PairIndex {
    /// Target edge per pair, ascending.
    pub target: Index,
    /// Source edge per pair.
    pub source: Index,
    /// `[P, 1]`: number of pairs sharing each pair's target.
    pub group_size: Tensor,
    /// Pair rows of target `t` are `offsets[t]..offsets[t + 1]`.
    pub offsets: Arc<[usize]>,
}

impl PairIndex {
    fn build(n_targets: usize, sources_of: impl Fn(usize) -> Vec<usize>) -> Self {
        let mut target = Vec::new();
        let mut source = Vec::new();
        let mut group_size = Vec::new();
        let mut offsets = Vec::with_capacity(n_targets + 1);
        for t in 0..n_targets {
            offsets.push(target.len());
            let src = sources_of(t);
            let n = src.len() as f64;
            for s in src {
                target.push(t);
                source.push(s);
                group_size.push(n);
            }
        }
        offsets.push(target.len());
        Self {
            target: Arc::from(target),
            source: Arc::from(source),
            group_size: Tensor::column(group_size),
            offsets: Arc::from(offsets),
        }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// A factor table that is `0` everywhere except `log_value` at index
/// `falsifying`, as every clause table is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClauseForm {
    pub falsifying: usize,
    pub log_value: f64,
}

impl ClauseForm {
    pub fn detect(log_table: &[f64]) -> Option<Self> {
        let mut off = log_table.iter().enumerate().filter(|(_, &v)| v != 0.0);
        let (falsifying, &log_value) = off.next()?;
        if off.next().is_some() || !log_value.is_finite() {
            return None;
        }
        Some(Self { falsifying, log_value })
    }
}

/// A factor graph plus every derived index the forward pass uses. Built
/// once per formula and shared across passes.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub fg: Arc<FactorGraph>,
    pub v2f_pairs: PairIndex,
    pub f2v_pairs: PairIndex,
    pub edge_var: Index,
    /// `[n_vars, 1]`: `degree - 1` per variable.
    pub deg_minus_one: Tensor,
    /// Owning factor of every entry of the concatenated factor tables.
    pub table_factor: Index,
    /// `[total_table_len, 1]` concatenated log tables.
    pub tables: Tensor,
    pub clause_forms: Arc<[Option<ClauseForm>]>,
}

impl ModelGraph {
    pub fn new(fg: FactorGraph) -> Self {
        let e = fg.n_edges();
        let v2f_pairs =
            PairIndex::build(e, |t| fg.var_edges[fg.edge_var[t]].iter().copied().filter(|&o| o != t).collect());
        let f2v_pairs = PairIndex::build(e, |t| fg.factor_edges(fg.edge_factor[t]).filter(|&o| o != t).collect());
        let deg_minus_one = Tensor::column(fg.degrees().iter().map(|&d| d as f64 - 1.0).collect());
        let mut table_factor = Vec::with_capacity(fg.total_table_len());
        let mut tables = Vec::with_capacity(fg.total_table_len());
        for (j, f) in fg.factors.iter().enumerate() {
            table_factor.extend(std::iter::repeat_n(j, f.table_len()));
            tables.extend_from_slice(&f.log_table);
        }
        let clause_forms = fg.factors.iter().map(|f| ClauseForm::detect(&f.log_table)).collect();
        Self {
            clause_forms,
            edge_var: Arc::from(fg.edge_var.clone()),
            deg_minus_one,
            table_factor: Arc::from(table_factor),
            tables: Tensor::column(tables),
            v2f_pairs,
            f2v_pairs,
            fg: Arc::new(fg),
        }
    }

    pub fn from_cnf(formula: &CnfFormula) -> Result<Self, FactorGraphError> {
        Ok(Self::new(FactorGraph::from_cnf(formula)?))
    }

    pub fn n_edges(&self) -> usize {
        self.fg.n_edges()
    }
}
