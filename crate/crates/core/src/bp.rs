//! Damped loopy belief propagation in log space with a Bethe free-energy
//! readout.
//!
//! Messages are length-2 log vectors kept normalized (log-sum-exp zero)
//! after every update. Updates are synchronous: iteration `k + 1` reads only
//! messages from iteration `k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{lse_marginal, FactorGraph};
use crate::math::{log_normalize2, log_sum_exp, xlogx};

/// Belief mass below which `b ln f` is treated as zero.
pub const BELIEF_FLOOR: f64 = 1e-20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BpError {
    #[error("message shape mismatch: {0} vs {1} edges")]
    ShapeMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub v2f: Vec<[f64; 2]>,
    pub f2v: Vec<[f64; 2]>,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpOptions {
    pub max_iters: usize,
    pub damping: f64,
    pub tol: f64,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self { max_iters: 5, damping: 0.5, tol: 1e-8 }
    }
}

/// The three Bethe terms read out after one iteration:
/// `energy = sum_j sum_x b_j ln f_j` (the negated average energy),
/// `factor_entropy = -sum_j sum_x b_j ln b_j` and
/// `var_entropy = sum_i (deg_i - 1) sum_x b_i ln b_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetheTerms {
    pub energy: f64,
    pub factor_entropy: f64,
    pub var_entropy: f64,
}

impl BetheTerms {
    /// `-F = -U + H`.
    pub fn neg_free_energy(&self) -> f64 {
        self.energy + self.factor_entropy + self.var_entropy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetheSummary {
    /// Average energy `U`.
    pub u: f64,
    /// Entropy `H`.
    pub h: f64,
    /// Free energy `F = U - H`.
    pub f: f64,
    pub per_iteration: Vec<BetheTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpEstimate {
    pub ln_z: f64,
    pub summary: BetheSummary,
    pub converged: bool,
    pub iterations: usize,
}

const UNIFORM: [f64; 2] = [-std::f64::consts::LN_2, -std::f64::consts::LN_2];

pub fn init_messages(fg: &FactorGraph) -> MessageState {
    let e = fg.n_edges();
    MessageState { v2f: vec![UNIFORM; e], f2v: vec![UNIFORM; e], iteration: 0 }
}

/// New variable-to-factor messages: for edge `i -> j`, the normalized sum of
/// the factor-to-variable messages into `i` from every other factor.
pub fn v2f_update(fg: &FactorGraph, f2v: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; fg.n_edges()];
    for edges in &fg.var_edges {
        for &e in edges {
            let mut acc = [0.0, 0.0];
            for &other in edges {
                if other != e {
                    acc[0] += f2v[other][0];
                    acc[1] += f2v[other][1];
                }
            }
            out[e] = log_normalize2(acc);
        }
    }
    out
}

/// New factor-to-variable messages: log-sum-exp over the other slots of the
/// factor table plus their incoming variable-to-factor messages.
pub fn f2v_update(fg: &FactorGraph, v2f: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; fg.n_edges()];
    for (j, factor) in fg.factors.iter().enumerate() {
        let range = fg.factor_edges(j);
        let msgs = &v2f[range.clone()];
        for (slot, e) in range.enumerate() {
            out[e] = log_normalize2(lse_marginal(&factor.log_table, slot, msgs));
        }
    }
    out
}

pub fn bp_step(fg: &FactorGraph, state: &MessageState) -> MessageState {
    MessageState { v2f: v2f_update(fg, &state.f2v), f2v: f2v_update(fg, &state.v2f), iteration: state.iteration + 1 }
}

pub fn damp_messages(prev: &[[f64; 2]], new: &[[f64; 2]], alpha: f64) -> Result<Vec<[f64; 2]>, BpError> {
    if prev.len() != new.len() {
        return Err(BpError::ShapeMismatch(prev.len(), new.len()));
    }
    Ok(prev
        .iter()
        .zip(new)
        .map(|(p, n)| log_normalize2([alpha * n[0] + (1.0 - alpha) * p[0], alpha * n[1] + (1.0 - alpha) * p[1]]))
        .collect())
}

/// `alpha * new + (1 - alpha) * prev` per log message, renormalized. The
/// result carries `new`'s iteration count.
pub fn damp(prev: &MessageState, new: &MessageState, alpha: f64) -> Result<MessageState, BpError> {
    Ok(MessageState {
        v2f: damp_messages(&prev.v2f, &new.v2f, alpha)?,
        f2v: damp_messages(&prev.f2v, &new.f2v, alpha)?,
        iteration: new.iteration,
    })
}

/// Per-variable marginals `[P(x = 0), P(x = 1)]`.
pub fn variable_beliefs(fg: &FactorGraph, state: &MessageState) -> Vec<[f64; 2]> {
    fg.var_edges
        .iter()
        .map(|edges| {
            let mut acc = [0.0, 0.0];
            for &e in edges {
                acc[0] += state.f2v[e][0];
                acc[1] += state.f2v[e][1];
            }
            let l = log_normalize2(acc);
            [l[0].exp(), l[1].exp()]
        })
        .collect()
}

/// Per-factor joint beliefs over the `2^arity` local assignments.
pub fn factor_beliefs(fg: &FactorGraph, state: &MessageState) -> Vec<Vec<f64>> {
    fg.factors
        .iter()
        .enumerate()
        .map(|(j, factor)| {
            let msgs = &state.v2f[fg.factor_edges(j)];
            let logits: Vec<f64> = factor
                .log_table
                .iter()
                .enumerate()
                .map(|(a, &t)| t + msgs.iter().enumerate().map(|(s, m)| m[(a >> s) & 1]).sum::<f64>())
                .collect();
            let z = log_sum_exp(&logits);
            logits.iter().map(|l| (l - z).exp()).collect()
        })
        .collect()
}

pub fn bethe_terms(fg: &FactorGraph, v_beliefs: &[[f64; 2]], f_beliefs: &[Vec<f64>]) -> BetheTerms {
    let mut energy = 0.0;
    let mut factor_entropy = 0.0;
    for (factor, b) in fg.factors.iter().zip(f_beliefs) {
        for (&bj, &t) in b.iter().zip(&factor.log_table) {
            if bj >= BELIEF_FLOOR {
                energy += bj * t;
            }
            factor_entropy -= xlogx(bj);
        }
    }
    let var_entropy =
        v_beliefs.iter().enumerate().map(|(i, b)| (fg.degree(i) as f64 - 1.0) * (xlogx(b[0]) + xlogx(b[1]))).sum();
    BetheTerms { energy, factor_entropy, var_entropy }
}

pub fn bethe_free_energy(fg: &FactorGraph, v_beliefs: &[[f64; 2]], f_beliefs: &[Vec<f64>]) -> BetheSummary {
    let t = bethe_terms(fg, v_beliefs, f_beliefs);
    let u = -t.energy;
    let h = t.factor_entropy + t.var_entropy;
    BetheSummary { u, h, f: u - h, per_iteration: vec![t] }
}

pub fn state_terms(fg: &FactorGraph, state: &MessageState) -> BetheTerms {
    bethe_terms(fg, &variable_beliefs(fg, state), &factor_beliefs(fg, state))
}

fn max_change(a: &MessageState, b: &MessageState) -> f64 {
    a.v2f
        .iter()
        .zip(&b.v2f)
        .chain(a.f2v.iter().zip(&b.f2v))
        .map(|(x, y)| (x[0] - y[0]).abs().max((x[1] - y[1]).abs()))
        .fold(0.0, f64::max)
}

/// Runs up to `max_iters` damped BP iterations, stopping early once no
/// message entry moves by more than `tol`, and reads out `ln Z ~ -F`.
pub fn estimate_ln_count(fg: &FactorGraph, opts: &BpOptions) -> BpEstimate {
    let mut state = init_messages(fg);
    let mut per_iteration = Vec::with_capacity(opts.max_iters);
    let mut converged = false;
    for _ in 0..opts.max_iters.max(1) {
        let raw = bp_step(fg, &state);
        let next = damp(&state, &raw, opts.damping).expect("shapes agree");
        let delta = max_change(&state, &next);
        state = next;
        per_iteration.push(state_terms(fg, &state));
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let mut summary = bethe_free_energy(fg, &variable_beliefs(fg, &state), &factor_beliefs(fg, &state));
    summary.per_iteration = per_iteration;
    BpEstimate { ln_z: -summary.f, summary, converged, iterations: state.iteration }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::CnfFormula;
    use crate::factor_graph::{partition_bruteforce, NEG_SENTINEL};
    use crate::math::lse2;

    const LN2: f64 = std::f64::consts::LN_2;

    fn fg(n: u32, clauses: &[&[i64]]) -> FactorGraph {
        FactorGraph::from_cnf(&CnfFormula::from_dimacs_clauses(n, clauses)).unwrap()
    }

    fn converge(g: &FactorGraph) -> BpEstimate {
        estimate_ln_count(g, &BpOptions { max_iters: 500, damping: 0.5, tol: 1e-12 })
    }

    #[test]
    fn init_is_uniform_and_normalized() {
        let g = fg(3, &[&[1, 2], &[2, 3]]);
        let s = init_messages(&g);
        assert_eq!(s.v2f.len(), 4);
        for m in s.v2f.iter().chain(&s.f2v) {
            assert!((m[0] + LN2).abs() < 1e-15 && (m[1] + LN2).abs() < 1e-15);
            assert!(lse2(m[0], m[1]).abs() < 1e-15);
        }
        assert_eq!(s, init_messages(&g));
    }

    #[test]
    fn unit_factor_message_is_its_table() {
        let g = fg(1, &[&[-1]]);
        let s = bp_step(&g, &init_messages(&g));
        let expected = log_normalize2([0.0, NEG_SENTINEL]);
        assert!((s.f2v[0][0] - expected[0]).abs() < 1e-15);
        assert!((s.f2v[0][1] - expected[1]).abs() < 1e-12);
        assert!(s.f2v[0][1] < -99.0);
    }

    #[test]
    fn single_clause_v2f_stays_uniform() {
        let g = fg(2, &[&[1, 2]]);
        let s = bp_step(&g, &init_messages(&g));
        for m in &s.v2f {
            assert!((m[0] + LN2).abs() < 1e-15 && (m[1] + LN2).abs() < 1e-15);
        }
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn chain_converges_within_four_steps() {
        let g = fg(3, &[&[1, 2], &[2, 3]]);
        let mut s = init_messages(&g);
        let mut delta = f64::INFINITY;
        for _ in 0..4 {
            let next = bp_step(&g, &s);
            delta = max_change(&s, &next);
            s = next;
        }
        assert!(delta < 1e-8, "delta {delta}");
    }

    #[test]
    fn damping_endpoints_and_midpoint() {
        let prev = vec![[0.0, -2.0]];
        let new = vec![[-2.0, 0.0]];
        let mid = damp_messages(&prev, &new, 0.5).unwrap();
        assert!((mid[0][0] + LN2).abs() < 1e-15 && (mid[0][1] + LN2).abs() < 1e-15);
        let one = damp_messages(&prev, &new, 1.0).unwrap();
        assert_eq!(one[0], log_normalize2(new[0]));
        let zero = damp_messages(&prev, &new, 0.0).unwrap();
        assert_eq!(zero[0], log_normalize2(prev[0]));
        assert_eq!(damp_messages(&prev, &[], 0.5), Err(BpError::ShapeMismatch(1, 0)));
    }

    #[test]
    fn beliefs_uniform_messages() {
        let g = fg(3, &[&[1, 2], &[2, 3]]);
        let s = init_messages(&g);
        for b in variable_beliefs(&g, &s) {
            assert!((b[0] - 0.5).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15);
        }
        let fb = factor_beliefs(&fg(2, &[&[1, 2]]), &init_messages(&fg(2, &[&[1, 2]])));
        assert!(fb[0][0] < 1e-30);
        for &p in &fb[0][1..] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((fb[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_clause_marginals_and_count() {
        let g = fg(2, &[&[1, 2]]);
        let est = converge(&g);
        assert!(est.converged);
        let b = variable_beliefs(&g, &{
            let mut s = init_messages(&g);
            for _ in 0..5 {
                s = bp_step(&g, &s);
            }
            s
        });
        assert!((b[0][0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((b[0][1] - 2.0 / 3.0).abs() < 1e-9);
        assert!((est.ln_z - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn free_variable_bethe() {
        let g = FactorGraph::from_factors(1, vec![]);
        let s = init_messages(&g);
        let summary = bethe_free_energy(&g, &variable_beliefs(&g, &s), &factor_beliefs(&g, &s));
        assert_eq!(summary.u, 0.0);
        assert!((summary.h - LN2).abs() < 1e-15);
        assert!((summary.f + LN2).abs() < 1e-15);
    }

    #[test]
    fn chain_is_exact() {
        let g = fg(3, &[&[1, 2], &[2, 3]]);
        let est = converge(&g);
        assert!((est.ln_z - 5f64.ln()).abs() < 1e-6);
        assert!((est.ln_z - partition_bruteforce(&g).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn loopy_triangle_is_close() {
        let g = fg(3, &[&[1, 2], &[2, 3], &[3, 1]]);
        let est = estimate_ln_count(&g, &BpOptions { max_iters: 200, ..BpOptions::default() });
        // (x1|x2)(x2|x3)(x3|x1): at most one variable false -> 4 models.
        assert!(est.ln_z.is_finite());
        assert!((est.ln_z - 4f64.ln()).abs() < 1.0);
    }

    #[test]
    fn records_per_iteration_terms_and_is_deterministic() {
        let g = fg(4, &[&[1, 2, -3], &[2, 3, 4], &[-1, -4]]);
        let opts = BpOptions { tol: 0.0, ..BpOptions::default() };
        let a = estimate_ln_count(&g, &opts);
        assert_eq!(a.summary.per_iteration.len(), 5);
        assert_eq!(a.iterations, 5);
        let last = a.summary.per_iteration.last().unwrap();
        assert!((last.neg_free_energy() - a.ln_z).abs() < 1e-12);
        let b = estimate_ln_count(&g, &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn unsat_input_stays_finite() {
        let g = fg(1, &[&[1], &[-1]]);
        assert!(estimate_ln_count(&g, &BpOptions::default()).ln_z.is_finite());
    }
}
