//! MLP and graph-attention building blocks on the tape.

use crate::diff::{BoundParams, Result, Tape, Var};

use super::attention::multi_head_attention;
use super::config::ModelConfig;
use super::graph::PairIndex;

pub fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Three linear layers with ReLU after the first two.
pub fn mlp(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.l0"), x)?;
    let h = tape.relu(h);
    let h = linear(tape, p, &format!("{prefix}.l1"), h)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.l2"), h)
}

pub struct AttentionOutput {
    /// `[E, d_out]` projected target rows.
    pub target_rows: Var,
    /// `[P, d_out]` projected source rows scaled by their coefficients.
    pub pair_rows: Var,
    /// `[P, 1]` attention weights; they sum to one over each target's pairs.
    pub coeffs: Var,
}

/// One attention head over message pairs.
///
/// Both tracks are projected by `w`. A pair's score is
/// `leaky_relu(a . [w x_target || w x_source])`, normalized over the pairs
/// of each target. The source row is weighted by `coeff * group_size`, so
/// uniform attention leaves the plain sum over sources unchanged.
pub fn gat_attention_layer(
    tape: &mut Tape,
    w: Var,
    a: Var,
    target_rows: Var,
    source_rows: Var,
    pairs: &PairIndex,
    slope: f64,
) -> Result<AttentionOutput> {
    let zt = tape.matmul(target_rows, w)?;
    let zs = tape.matmul(source_rows, w)?;
    let zt_pairs = tape.gather_rows(zt, &pairs.target)?;
    let joint = tape.concat(&[zt_pairs, zs], 1)?;
    let score = tape.matmul(joint, a)?;
    let score = tape.leaky_relu(score, slope);
    let coeffs = tape.segment_softmax(score, &pairs.target)?;
    let size = tape.constant(pairs.group_size.clone());
    let weight = tape.mul(coeffs, size)?;
    let pair_rows = tape.scale_rows(zs, weight)?;
    Ok(AttentionOutput { target_rows: zt, pair_rows, coeffs })
}

/// Full multi-head stack for one message direction. Returns the `[P, 2]`
/// transformed source rows; heads are concatenated between layers and
/// averaged at the last one.
pub fn gat_stack(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    target_msgs: Var,
    source_msgs: Var,
    pairs: &PairIndex,
) -> Result<Var> {
    let mut targets = target_msgs;
    let mut sources = source_msgs;
    let n_layers = cfg.gat_heads.len();
    for (l, &heads) in cfg.gat_heads.iter().enumerate() {
        let last = l + 1 == n_layers;
        let mut ws = Vec::with_capacity(heads);
        let mut a_s = Vec::with_capacity(heads);
        for h in 0..heads {
            ws.push(p.get(&format!("{prefix}.gat.l{l}.h{h}.w"))?);
            a_s.push(p.get(&format!("{prefix}.gat.l{l}.h{h}.a"))?);
        }
        let next = multi_head_attention(tape, &ws, &a_s, targets, sources, pairs, cfg.leaky_slope, last)?;
        if !last {
            let w_all = tape.concat(&ws, 1)?;
            targets = tape.matmul(targets, w_all)?;
        }
        sources = next;
    }
    Ok(sources)
}

/// [`gat_stack`] recorded op by op from [`gat_attention_layer`]; slower, and
/// kept as the reference the fused kernel is checked against.
pub fn gat_stack_reference(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    target_msgs: Var,
    source_msgs: Var,
    pairs: &PairIndex,
) -> Result<Var> {
    let mut targets = target_msgs;
    let mut sources = source_msgs;
    let n_layers = cfg.gat_heads.len();
    for (l, &heads) in cfg.gat_heads.iter().enumerate() {
        let mut t_heads = Vec::with_capacity(heads);
        let mut s_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let w = p.get(&format!("{prefix}.gat.l{l}.h{h}.w"))?;
            let a = p.get(&format!("{prefix}.gat.l{l}.h{h}.a"))?;
            let out = gat_attention_layer(tape, w, a, targets, sources, pairs, cfg.leaky_slope)?;
            t_heads.push(out.target_rows);
            s_heads.push(out.pair_rows);
        }
        if l + 1 == n_layers {
            let mut acc = s_heads[0];
            for &s in &s_heads[1..] {
                acc = tape.add(acc, s)?;
            }
            sources = tape.mul_scalar(acc, 1.0 / heads as f64);
        } else {
            targets = tape.concat(&t_heads, 1)?;
            sources = tape.concat(&s_heads, 1)?;
        }
    }
    Ok(sources)
}
