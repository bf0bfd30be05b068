//! Fused factor kernels with hand-written backward passes.

use std::sync::Arc;

use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::factor_graph::{lse_marginal, lse_marginal_backward, FactorGraph};
use crate::math::lse2;

use super::graph::{ClauseForm, ModelGraph};

/// [`lse_marginal`] for a table that is zero except at one entry, in
/// `O(arity)`.
///
/// With `p_s` the normalized message of slot `s` and `q = sum_s ln p_s(f_s)`
/// over the other slots, the falsifying value of the target slot gets
/// `L + ln(1 - e^q + e^(c + q))` and the other value gets `L`, where
/// `L = sum_s lse(m_s)` and `c` is the lone table entry.
pub fn clause_marginal(form: ClauseForm, slot: usize, msgs: &[[f64; 2]]) -> [f64; 2] {
    let (l, q) = clause_sums(form, slot, msgs);
    let d = -q.exp_m1() + (form.log_value + q).exp();
    let ft = (form.falsifying >> slot) & 1;
    let mut out = [l, l];
    out[ft] += d.ln();
    out
}

/// `ln(1 / (1 + e^-x))` without cancellation near zero.
fn log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn clause_sums(form: ClauseForm, slot: usize, msgs: &[[f64; 2]]) -> (f64, f64) {
    let mut l = 0.0;
    let mut q = 0.0;
    for (s, m) in msgs.iter().enumerate() {
        if s != slot {
            let fs = (form.falsifying >> s) & 1;
            l += lse2(m[0], m[1]);
            q += log_sigmoid(m[fs] - m[1 - fs]);
        }
    }
    (l, q)
}

pub fn clause_marginal_backward(
    form: ClauseForm,
    slot: usize,
    msgs: &[[f64; 2]],
    grad_out: [f64; 2],
    grad_msgs: &mut [[f64; 2]],
) {
    let (_, q) = clause_sums(form, slot, msgs);
    let d = -q.exp_m1() + (form.log_value + q).exp();
    let ft = (form.falsifying >> slot) & 1;
    // d ln D / dq
    let k = -q.exp() * (-form.log_value.exp_m1()) / d;
    let g_all = grad_out[0] + grad_out[1];
    for (s, m) in msgs.iter().enumerate() {
        if s == slot {
            continue;
        }
        let z = lse2(m[0], m[1]);
        let p = [(m[0] - z).exp(), (m[1] - z).exp()];
        let fs = (form.falsifying >> s) & 1;
        // dq/dm_s(y) = [y == f_s] - p_s(y), written without cancellation.
        let mut dq = [0.0; 2];
        dq[fs] = p[1 - fs];
        dq[1 - fs] = -p[1 - fs];
        for y in 0..2 {
            grad_msgs[s][y] += g_all * p[y] + grad_out[ft] * k * dq[y];
        }
    }
}

/// Factor-to-variable marginalization. Input: one row per f2v pair (the
/// possibly transformed incoming message). Output `[E, 2]`: for target
/// `j -> i`, the log-sum-exp over the factor's assignments of the table plus
/// the pair rows, split by the value of `i`. Not normalized.
struct FactorMarginal {
    fg: Arc<FactorGraph>,
    forms: Arc<[Option<ClauseForm>]>,
    offsets: Arc<[usize]>,
}

impl FactorMarginal {
    /// Slot-indexed message array for target edge `t`; the target's own slot
    /// holds a dummy.
    fn msgs(&self, rows: &Tensor, t: usize) -> Vec<[f64; 2]> {
        let j = self.fg.edge_factor[t];
        let slot = self.fg.edge_slot[t];
        let k = self.fg.factors[j].arity();
        let mut msgs = vec![[0.0; 2]; k];
        let mut p = self.offsets[t];
        for (s, m) in msgs.iter_mut().enumerate() {
            if s != slot {
                *m = [rows.get(p, 0), rows.get(p, 1)];
                p += 1;
            }
        }
        msgs
    }

    fn forward(&self, rows: &Tensor) -> Tensor {
        let e = self.fg.n_edges();
        let mut out = Vec::with_capacity(2 * e);
        for t in 0..e {
            let j = self.fg.edge_factor[t];
            let slot = self.fg.edge_slot[t];
            let msgs = self.msgs(rows, t);
            let m = match self.forms[j] {
                Some(form) => clause_marginal(form, slot, &msgs),
                None => lse_marginal(&self.fg.factors[j].log_table, slot, &msgs),
            };
            out.extend_from_slice(&m);
        }
        Tensor::new(e, 2, out)
    }
}

impl CustomOp for FactorMarginal {
    fn name(&self) -> &'static str {
        "factor_marginal"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        let rows = inputs[0];
        for t in 0..self.fg.n_edges() {
            let g = [grad_out[2 * t], grad_out[2 * t + 1]];
            if g == [0.0, 0.0] {
                continue;
            }
            let j = self.fg.edge_factor[t];
            let slot = self.fg.edge_slot[t];
            let msgs = self.msgs(rows, t);
            let mut gm = vec![[0.0; 2]; msgs.len()];
            match self.forms[j] {
                Some(form) => clause_marginal_backward(form, slot, &msgs, g, &mut gm),
                None => {
                    let out = [output.get(t, 0), output.get(t, 1)];
                    lse_marginal_backward(&self.fg.factors[j].log_table, slot, &msgs, out, g, &mut gm)
                }
            }
            let mut p = self.offsets[t];
            for (s, gs) in gm.iter().enumerate() {
                if s != slot {
                    grad_inputs[0][2 * p] += gs[0];
                    grad_inputs[0][2 * p + 1] += gs[1];
                    p += 1;
                }
            }
        }
    }
}

pub fn factor_marginal(tape: &mut Tape, graph: &ModelGraph, pair_rows: Var) -> Var {
    let op = FactorMarginal {
        fg: graph.fg.clone(),
        forms: graph.clause_forms.clone(),
        offsets: graph.f2v_pairs.offsets.clone(),
    };
    let out = op.forward(tape.value(pair_rows));
    tape.custom(vec![pair_rows], out, Box::new(op))
}

/// Unnormalized factor log-beliefs: entry `a` of factor `j` is
/// `log_table[a] + sum_s v2f[edge(j, s)][a_s]`. Input `[E, 2]`, output
/// `[total_table_len, 1]`.
struct FactorLogits {
    fg: Arc<FactorGraph>,
}

impl CustomOp for FactorLogits {
    fn name(&self) -> &'static str {
        "factor_logits"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        let g = &mut grad_inputs[0];
        for (j, f) in self.fg.factors.iter().enumerate() {
            let base = self.fg.table_offsets[j];
            let edges = self.fg.factor_edges(j);
            for a in 0..f.table_len() {
                let w = grad_out[base + a];
                for (s, e) in edges.clone().enumerate() {
                    g[2 * e + ((a >> s) & 1)] += w;
                }
            }
        }
    }
}

pub fn factor_logits(tape: &mut Tape, graph: &ModelGraph, v2f: Var) -> Var {
    let fg = &graph.fg;
    let msgs = tape.value(v2f);
    let mut out = Vec::with_capacity(fg.total_table_len());
    for (j, f) in fg.factors.iter().enumerate() {
        let edges = fg.factor_edges(j);
        for (a, &t) in f.log_table.iter().enumerate() {
            let mut acc = t;
            for (s, e) in edges.clone().enumerate() {
                acc += msgs.get(e, (a >> s) & 1);
            }
            out.push(acc);
        }
    }
    let out = Tensor::column(out);
    tape.custom(vec![v2f], out, Box::new(FactorLogits { fg: fg.clone() }))
}
