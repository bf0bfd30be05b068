//! Differentiable message passing, Bethe features and readout.

use crate::bp::{BetheTerms, BELIEF_FLOOR};
use crate::diff::{BoundParams, ParamSet, Result, Tape, Tensor, Var};

use super::config::{ModelConfig, Readout, Transform};
use super::graph::{ModelGraph, PairIndex};
use super::layers::{gat_stack, mlp};
use super::ops::{factor_logits, factor_marginal};

/// Scalar tape handles of one iteration's Bethe terms.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub energy: Var,
    pub factor_entropy: Var,
    pub var_entropy: Var,
}

impl FeatureVars {
    pub fn values(&self, tape: &Tape) -> BetheTerms {
        BetheTerms {
            energy: tape.value(self.energy).item(),
            factor_entropy: tape.value(self.factor_entropy).item(),
            var_entropy: tape.value(self.var_entropy).item(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[1, 1]` estimate of `ln Z`.
    pub ln_z: Var,
    pub features: Vec<FeatureVars>,
    pub v2f: Var,
    pub f2v: Var,
}

fn uniform_messages(tape: &mut Tape, n_edges: usize) -> Var {
    tape.constant(Tensor::new(n_edges, 2, vec![-std::f64::consts::LN_2; 2 * n_edges]))
}

/// Source rows for `pairs`: the source messages, run through the direction's
/// MLP first when it has one.
fn source_rows(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    transform: Transform,
    msgs: Var,
    pairs: &PairIndex,
) -> Result<Var> {
    let msgs = if transform == Transform::Mlp { mlp(tape, p, &format!("{prefix}.mlp"), msgs)? } else { msgs };
    tape.gather_rows(msgs, &pairs.source)
}

#[allow(clippy::too_many_arguments)]
fn attend(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    transform: Transform,
    own: Var,
    rows: Var,
    pairs: &PairIndex,
) -> Result<Var> {
    if transform == Transform::Gat && !pairs.is_empty() {
        gat_stack(tape, p, cfg, prefix, own, rows, pairs)
    } else {
        Ok(rows)
    }
}

/// New variable-to-factor messages from the current `f2v` messages. `v2f`
/// is the previous outgoing message on each edge, used as the attention
/// query.
pub fn v2f_update(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    graph: &ModelGraph,
    v2f: Var,
    f2v: Var,
) -> Result<Var> {
    let transform = cfg.variant.transforms().0;
    let pairs = &graph.v2f_pairs;
    let rows = source_rows(tape, p, "v2f", transform, f2v, pairs)?;
    let rows = attend(tape, p, cfg, "v2f", transform, v2f, rows, pairs)?;
    let summed = tape.segment_sum(rows, &pairs.target, graph.n_edges())?;
    Ok(tape.log_normalize_rows(summed))
}

/// New factor-to-variable messages from the current `v2f` messages.
pub fn f2v_update(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    graph: &ModelGraph,
    v2f: Var,
    f2v: Var,
) -> Result<Var> {
    let transform = cfg.variant.transforms().1;
    let pairs = &graph.f2v_pairs;
    let rows = source_rows(tape, p, "f2v", transform, v2f, pairs)?;
    let rows = attend(tape, p, cfg, "f2v", transform, f2v, rows, pairs)?;
    let out = factor_marginal(tape, graph, rows);
    Ok(tape.log_normalize_rows(out))
}

/// Learned damping `prev + delta(new - prev)` or scalar damping
/// `alpha new + (1 - alpha) prev`, renormalized.
fn damp(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    learned: bool,
    prev: Var,
    new: Var,
) -> Result<Var> {
    let mixed = if learned {
        let diff = tape.sub(new, prev)?;
        let step = mlp(tape, p, &format!("{prefix}.delta"), diff)?;
        tape.add(prev, step)?
    } else {
        let a = tape.mul_scalar(new, cfg.alpha);
        let b = tape.mul_scalar(prev, 1.0 - cfg.alpha);
        tape.add(a, b)?
    };
    Ok(tape.log_normalize_rows(mixed))
}

/// Bethe terms of the current messages, differentiable in both directions.
pub fn compute_iteration_features(tape: &mut Tape, graph: &ModelGraph, v2f: Var, f2v: Var) -> Result<FeatureVars> {
    let fg = &graph.fg;

    let var_sums = tape.segment_sum(f2v, &graph.edge_var, fg.n_vars)?;
    let var_log_b = tape.log_normalize_rows(var_sums);
    let var_b = tape.exp(var_log_b);
    let plogp = tape.mul(var_b, var_log_b)?;
    let weights = tape.constant(graph.deg_minus_one.clone());
    let weighted = tape.scale_rows(plogp, weights)?;
    let var_entropy = tape.sum(weighted);

    if fg.n_factors() == 0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(FeatureVars { energy: zero, factor_entropy: zero, var_entropy });
    }
    let logits = factor_logits(tape, graph, v2f);
    let log_b = tape.segment_log_softmax(logits, &graph.table_factor)?;
    let b = tape.exp(log_b);
    let plogp = tape.mul(b, log_b)?;
    let neg_h = tape.sum(plogp);
    let factor_entropy = tape.mul_scalar(neg_h, -1.0);
    // Entries with vanishing belief are dropped from the energy so that
    // sentinel table values do not leak into it.
    let masked: Vec<f64> = tape
        .value(b)
        .values
        .iter()
        .zip(&graph.tables.values)
        .map(|(&bj, &t)| if bj >= BELIEF_FLOOR { t } else { 0.0 })
        .collect();
    let masked = tape.constant(Tensor::column(masked));
    let be = tape.mul(b, masked)?;
    let energy = tape.sum(be);
    Ok(FeatureVars { energy, factor_entropy, var_entropy })
}

/// Maps the per-iteration features to `ln Z`.
pub fn readout(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, features: &[FeatureVars]) -> Result<Var> {
    match cfg.readout {
        Readout::BetheBypass => {
            let last = features.last().expect("at least one iteration");
            let s = tape.add(last.energy, last.factor_entropy)?;
            tape.add(s, last.var_entropy)
        }
        Readout::Mlp3 => {
            let parts: Vec<Var> = features.iter().flat_map(|f| [f.energy, f.factor_entropy, f.var_entropy]).collect();
            let row = tape.concat(&parts, 1)?;
            mlp(tape, p, "readout", row)
        }
    }
}

/// Records `T` iterations of the configured message passing and the readout.
pub fn forward_on_tape(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, graph: &ModelGraph) -> Result<ForwardVars> {
    let e = graph.n_edges();
    let mut v2f = uniform_messages(tape, e);
    let mut f2v = uniform_messages(tape, e);
    let (learn_v2f, learn_f2v) = cfg.damping_mode.learned();
    let mut features = Vec::with_capacity(cfg.t);
    for _ in 0..cfg.t {
        let new_v2f = v2f_update(tape, p, cfg, graph, v2f, f2v)?;
        let new_f2v = f2v_update(tape, p, cfg, graph, v2f, f2v)?;
        v2f = damp(tape, p, cfg, "v2f", learn_v2f, v2f, new_v2f)?;
        f2v = damp(tape, p, cfg, "f2v", learn_f2v, f2v, new_f2v)?;
        features.push(compute_iteration_features(tape, graph, v2f, f2v)?);
    }
    let ln_z = readout(tape, p, cfg, &features)?;
    Ok(ForwardVars { ln_z, features, v2f, f2v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ln_z: f64,
    /// Bethe terms after each iteration.
    pub trace: Vec<BetheTerms>,
}

/// Forward pass without gradients.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, graph: &ModelGraph) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &bound, cfg, graph)?;
    Ok(Prediction { ln_z: tape.value(out.ln_z).item(), trace: out.features.iter().map(|f| f.values(&tape)).collect() })
}

/// Squared error `(ln_z_hat - target)^2` and its gradient.
pub fn loss_and_grad(
    params: &ParamSet,
    cfg: &ModelConfig,
    graph: &ModelGraph,
    target: f64,
) -> Result<(f64, f64, ParamSet)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &bound, cfg, graph)?;
    let y = tape.constant(Tensor::scalar(target));
    let loss = tape.mse(out.ln_z, y)?;
    let grads = bound.grads(&tape.backward(loss)?);
    Ok((tape.value(loss).item(), tape.value(out.ln_z).item(), grads))
}
