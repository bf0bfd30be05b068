//! Parameter layout and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{ParamSet, Tensor};

use super::config::{Init, ModelConfig, Readout, Transform};

/// One learnable tensor: its name, shape, fan-in for random init and its
/// value under the BP-identity init.
struct Spec {
    name: String,
    fan_in: usize,
    identity: Tensor,
}

/// `din -> H -> H -> dout` MLP. Its identity init copies the input when
/// `dout == 2` and returns the sum of inputs `sum_from..` when `dout == 1`.
fn mlp_specs(out: &mut Vec<Spec>, prefix: &str, din: usize, hidden: usize, dout: usize, sum_from: usize) {
    // Identity via x = relu(x) - relu(-x): hidden units 2c and 2c + 1 carry
    // the positive and negative parts of output coordinate c.
    let mut w0 = Tensor::zeros(din, hidden);
    let mut w2 = Tensor::zeros(hidden, dout);
    for c in 0..dout.min(hidden / 2) {
        if dout == 1 {
            for r in sum_from..din {
                w0.set(r, 0, 1.0);
                w0.set(r, 1, -1.0);
            }
        } else {
            w0.set(c, 2 * c, 1.0);
            w0.set(c, 2 * c + 1, -1.0);
        }
        w2.set(2 * c, c, 1.0);
        w2.set(2 * c + 1, c, -1.0);
    }
    let layers = [(din, w0), (hidden, Tensor::identity(hidden)), (hidden, w2)];
    for (l, (fan_in, w)) in layers.into_iter().enumerate() {
        let cols = w.cols();
        out.push(Spec { name: format!("{prefix}.l{l}.w"), fan_in, identity: w });
        out.push(Spec { name: format!("{prefix}.l{l}.b"), fan_in, identity: Tensor::zeros(1, cols) });
    }
}

fn gat_specs(out: &mut Vec<Spec>, prefix: &str, cfg: &ModelConfig) {
    for (l, &heads) in cfg.gat_heads.iter().enumerate() {
        let din = cfg.layer_in_dim(l);
        let dout = cfg.head_out_dim(l);
        // Identity: the first layer embeds the message in the first two
        // coordinates; later layers average the previous heads' copies.
        let mut w = Tensor::zeros(din, dout);
        if l == 0 {
            for c in 0..2.min(dout) {
                w.set(c, c, 1.0);
            }
        } else {
            let prev_heads = cfg.gat_heads[l - 1];
            let block = cfg.gat_head_dim;
            for h in 0..prev_heads {
                for c in 0..2.min(dout).min(block) {
                    w.set(h * block + c, c, 1.0 / prev_heads as f64);
                }
            }
        }
        for h in 0..heads {
            out.push(Spec { name: format!("{prefix}.gat.l{l}.h{h}.w"), fan_in: din, identity: w.clone() });
            out.push(Spec {
                name: format!("{prefix}.gat.l{l}.h{h}.a"),
                fan_in: 2 * dout,
                identity: Tensor::zeros(2 * dout, 1),
            });
        }
    }
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let mut out = Vec::new();
    let (v2f, f2v) = cfg.variant.transforms();
    for (dir, transform) in [("v2f", v2f), ("f2v", f2v)] {
        match transform {
            Transform::None => {}
            Transform::Mlp => mlp_specs(&mut out, &format!("{dir}.mlp"), 2, cfg.mlp_hidden, 2, 0),
            Transform::Gat => gat_specs(&mut out, dir, cfg),
        }
    }
    let (learn_v2f, learn_f2v) = cfg.damping_mode.learned();
    for (dir, learned) in [("v2f", learn_v2f), ("f2v", learn_f2v)] {
        if learned {
            mlp_specs(&mut out, &format!("{dir}.delta"), 2, cfg.mlp_hidden, 2, 0);
        }
    }
    if cfg.readout == Readout::Mlp3 {
        let din = 3 * cfg.t;
        mlp_specs(&mut out, "readout", din, cfg.mlp_hidden, 1, din - 3);
    }
    out
}

/// Builds the parameter set `cfg` calls for. Random init draws every entry
/// uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, tensors in layout
/// order.
pub fn init_params(cfg: &ModelConfig) -> ParamSet {
    let mut params = ParamSet::new();
    let specs = specs(cfg);
    match cfg.init {
        Init::BpIdentity => {
            for s in specs {
                params.insert(s.name, s.identity);
            }
        }
        Init::SeededRandom { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for s in specs {
                let bound = 1.0 / (s.fan_in.max(1) as f64).sqrt();
                let (r, c) = (s.identity.rows(), s.identity.cols());
                let values = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
                params.insert(s.name, Tensor::new(r, c, values));
            }
        }
    }
    params
}

/// Whether `params` has exactly the names and shapes `cfg` calls for.
pub fn layout_matches(cfg: &ModelConfig, params: &ParamSet) -> bool {
    let expected = specs(cfg);
    expected.len() == params.len()
        && expected.iter().all(|s| params.get(&s.name).is_some_and(|t| t.shape == s.identity.shape))
}
