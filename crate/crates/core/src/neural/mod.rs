//! Belief propagation with learned message transforms.
//!
//! A model runs `T` synchronous iterations over a clause factor graph. Each
//! direction's update is plain BP, BP with every incoming message passed
//! through an MLP, or BP with incoming messages reweighted by a multi-head
//! attention stack. Damping is either scalar or a learned map of the message
//! change, and `ln Z` is read from the per-iteration Bethe terms.

mod attention;
mod config;
mod graph;
mod init;
mod layers;
mod model;
mod ops;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, ParamSet};
use crate::factor_graph::FactorGraphError;

pub use attention::multi_head_attention;
pub use config::{DampingMode, Init, ModelConfig, Readout, Transform, Variant};
pub use graph::{ClauseForm, ModelGraph, PairIndex};
pub use init::{init_params, layout_matches};
pub use layers::{gat_attention_layer, gat_stack, gat_stack_reference, mlp, AttentionOutput};
pub use model::{
    compute_iteration_features, f2v_update, forward_on_tape, loss_and_grad, predict, readout, v2f_update, FeatureVars,
    ForwardVars, Prediction,
};
pub use ops::{clause_marginal, clause_marginal_backward, factor_logits, factor_marginal};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] FactorGraphError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        if !layout_matches(&config, &params) {
            return Err(ModelError::Checkpoint("parameters do not match the config's layout".into()));
        }
        if !params.is_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn predict(&self, graph: &ModelGraph) -> Result<Prediction, ModelError> {
        Ok(predict(&self.params, &self.config, graph)?)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format_version {}", ck.format_version)));
        }
        for (name, t) in ck.params.iter() {
            if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.values.len() {
                return Err(ModelError::Checkpoint(format!("tensor `{name}` has inconsistent shape {:?}", t.shape)));
            }
        }
        Self::from_parts(ck.config, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::{estimate_ln_count, BpOptions};
    use crate::cnf::CnfFormula;
    use crate::datagen::{rng_from_seed, sample_random_formula, GenParams};
    use crate::diff::{finite_diff_check, Tape};
    use crate::factor_graph::FactorGraph;
    use rand::seq::SliceRandom;

    fn small_formulas(n: usize, seed: u64) -> Vec<CnfFormula> {
        let params = GenParams::with_ranges((4, 9), (5, 14), seed);
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| sample_random_formula(&params, &mut rng).formula.normalize()).collect()
    }

    fn graph(f: &CnfFormula) -> ModelGraph {
        ModelGraph::from_cnf(f).unwrap()
    }

    #[test]
    fn bp_identity_reproduces_bp_for_every_variant() {
        let bp_opts = BpOptions { max_iters: 5, damping: 0.5, tol: 0.0 };
        for f in small_formulas(12, 3) {
            let g = graph(&f);
            let bp = estimate_ln_count(&g.fg, &bp_opts);
            for v in Variant::ALL {
                let model = Model::new(ModelConfig::bp_equivalent(v, 5, 0.5)).unwrap();
                let pred = model.predict(&g).unwrap();
                assert!((pred.ln_z - bp.ln_z).abs() < 1e-6, "{v}: {} vs {}", pred.ln_z, bp.ln_z);
                for (a, b) in pred.trace.iter().zip(&bp.summary.per_iteration) {
                    assert!((a.neg_free_energy() - b.neg_free_energy()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_delta_and_readout_match_undamped_bp() {
        let bp_opts = BpOptions { max_iters: 4, damping: 1.0, tol: 0.0 };
        let cfg = ModelConfig {
            t: 4,
            damping_mode: DampingMode::DeltaAll,
            readout: Readout::Mlp3,
            init: Init::BpIdentity,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        for f in small_formulas(6, 9) {
            let g = graph(&f);
            let bp = estimate_ln_count(&g.fg, &bp_opts);
            let pred = model.predict(&g).unwrap();
            assert!((pred.ln_z - bp.ln_z).abs() < 1e-6, "{} vs {}", pred.ln_z, bp.ln_z);
        }
    }

    #[test]
    fn tree_formula_is_exact_under_identity() {
        // x1 or x2, x2 or x3: 5 models
        let f = CnfFormula::from_dimacs_clauses(3, &[&[1, 2], &[2, 3]]);
        let model = Model::new(ModelConfig::bp_equivalent(Variant::Bpgat, 10, 1.0)).unwrap();
        let pred = model.predict(&graph(&f)).unwrap();
        assert!((pred.ln_z - 5f64.ln()).abs() < 1e-6);
    }

    fn permuted(f: &CnfFormula, seed: u64) -> CnfFormula {
        let mut rng = rng_from_seed(seed);
        let mut clauses = f.clauses.clone();
        clauses.shuffle(&mut rng);
        for c in &mut clauses {
            c.literals.shuffle(&mut rng);
        }
        CnfFormula::new(f.n_vars, clauses)
    }

    #[test]
    fn predictions_ignore_clause_and_literal_order() {
        for v in Variant::ALL {
            let cfg = ModelConfig { variant: v, init: Init::SeededRandom { seed: 11 }, ..ModelConfig::default() };
            let model = Model::new(cfg).unwrap();
            for (i, f) in small_formulas(4, 21).iter().enumerate() {
                let a = model.predict(&graph(f)).unwrap().ln_z;
                let b = model.predict(&graph(&permuted(f, i as u64))).unwrap().ln_z;
                assert!((a - b).abs() < 1e-9, "{v}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_coefficients_are_distributions() {
        let f = &small_formulas(1, 5)[0];
        let g = graph(f);
        let model = Model::new(ModelConfig { init: Init::SeededRandom { seed: 2 }, ..ModelConfig::default() }).unwrap();
        for pairs in [&g.v2f_pairs, &g.f2v_pairs] {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let e = g.n_edges();
            let own = tape.constant(crate::diff::Tensor::new(e, 2, (0..2 * e).map(|i| (i as f64).sin()).collect()));
            let src = tape.gather_rows(own, &pairs.source).unwrap();
            let out = gat_attention_layer(
                &mut tape,
                p.get("v2f.gat.l0.h1.w").unwrap(),
                p.get("v2f.gat.l0.h1.a").unwrap(),
                own,
                src,
                pairs,
                0.2,
            )
            .unwrap();
            let c = &tape.value(out.coeffs).values;
            for t in 0..e {
                let range = pairs.offsets[t]..pairs.offsets[t + 1];
                if range.is_empty() {
                    continue;
                }
                let s: f64 = c[range.clone()].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                if range.len() == 1 {
                    assert_eq!(c[range.start], 1.0);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 4 variables, 3 clauses
        let f = CnfFormula::from_dimacs_clauses(4, &[&[1, -2, 3], &[-1, 4], &[2, 3, -4]]);
        let g = graph(&f);
        for v in Variant::ALL {
            let cfg = ModelConfig {
                variant: v,
                t: 3,
                damping_mode: DampingMode::DeltaAll,
                init: Init::SeededRandom { seed: 4 },
                ..ModelConfig::default()
            };
            let model = Model::new(cfg.clone()).unwrap();
            let report =
                finite_diff_check(&model.params, 1e-6, |tape, p| Ok(forward_on_tape(tape, p, &cfg, &g)?.ln_z)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = ModelConfig { init: Init::SeededRandom { seed: 8 }, ..ModelConfig::default() };
        let a = Model::new(cfg.clone()).unwrap();
        let b = Model::new(cfg.clone()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig { init: Init::SeededRandom { seed: 9 }, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
        let g = graph(&small_formulas(1, 1)[0]);
        assert_eq!(a.predict(&g).unwrap(), b.predict(&g).unwrap());
    }

    #[test]
    fn layouts_follow_the_config() {
        let cfg = ModelConfig::with_variant(Variant::FvgatVfnone);
        let p = init_params(&cfg);
        assert!(p.names().all(|n| !n.starts_with("v2f.gat") && !n.starts_with("v2f.mlp")));
        assert!(p.contains("f2v.gat.l2.h5.w"));
        assert!(p.contains("f2v.delta.l0.w") && !p.contains("v2f.delta.l0.w"));
        assert_eq!(p.get("f2v.gat.l0.h0.w").unwrap().shape, vec![2, 2]);
        assert_eq!(p.get("f2v.gat.l1.h0.w").unwrap().shape, vec![8, 2]);
        assert_eq!(p.get("readout.l0.w").unwrap().shape, vec![15, 8]);
        let bypass = ModelConfig { readout: Readout::BetheBypass, ..cfg };
        assert!(!init_params(&bypass).contains("readout.l0.w"));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg =
            ModelConfig { variant: Variant::FvmlpVfgat, init: Init::SeededRandom { seed: 5 }, ..Default::default() };
        let model = Model::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(model, back);
        let g = graph(&small_formulas(1, 2)[0]);
        assert_eq!(model.predict(&g).unwrap().ln_z.to_bits(), back.predict(&g).unwrap().ln_z.to_bits());
    }

    #[test]
    fn bad_checkpoints_are_rejected() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        v["format_version"] = 2.into();
        assert!(matches!(Model::from_json(&v.to_string()), Err(ModelError::Checkpoint(_))));
        v["format_version"] = 1.into();
        v["config"]["variant"] = "bpnn".into();
        assert!(matches!(Model::from_json(&v.to_string()), Err(ModelError::Checkpoint(_))));
        assert!(Model::from_json("{").is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { t: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { gat_heads: vec![], ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { alpha: 1.5, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { init: Init::BpIdentity, mlp_hidden: 3, ..ok }.validate().is_err());
        assert_eq!("fvgat_vfmlp".parse::<Variant>().unwrap(), Variant::FvgatVfmlp);
        assert_eq!("delta_all".parse::<DampingMode>().unwrap(), DampingMode::DeltaAll);
        assert!("gat".parse::<Variant>().is_err());
    }

    #[test]
    fn clause_closed_form_matches_enumeration() {
        use crate::factor_graph::{lse_marginal, lse_marginal_backward, NEG_SENTINEL};
        use rand::Rng;
        let mut rng = rng_from_seed(17);
        for k in 1..=7usize {
            for _ in 0..20 {
                let falsifying = rng.random_range(0..1usize << k);
                let mut table = vec![0.0; 1 << k];
                table[falsifying] = NEG_SENTINEL;
                let form = ClauseForm::detect(&table).unwrap();
                let scale = if rng.random_bool(0.3) { 40.0 } else { 3.0 };
                let msgs: Vec<[f64; 2]> =
                    (0..k).map(|_| [rng.random_range(-scale..0.0), rng.random_range(-scale..0.0)]).collect();
                let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                for slot in 0..k {
                    let fast = clause_marginal(form, slot, &msgs);
                    let slow = lse_marginal(&table, slot, &msgs);
                    for x in 0..2 {
                        assert!((fast[x] - slow[x]).abs() < 1e-10 * (1.0 + slow[x].abs()), "{fast:?} {slow:?}");
                    }
                    let mut ga = vec![[0.0; 2]; k];
                    let mut gb = vec![[0.0; 2]; k];
                    clause_marginal_backward(form, slot, &msgs, g, &mut ga);
                    lse_marginal_backward(&table, slot, &msgs, slow, g, &mut gb);
                    for (a, b) in ga.iter().zip(&gb) {
                        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9, "{ga:?} {gb:?}");
                    }
                }
            }
        }
        assert_eq!(ClauseForm::detect(&[0.0, 0.0]), None);
        assert_eq!(ClauseForm::detect(&[0.0, -1.0, -1.0, 0.0]), None);
    }

    #[test]
    fn uniform_single_clause_features() {
        // x1 or x2 under uniform messages: beliefs (0, 1/3, 1/3, 1/3)
        let g = graph(&CnfFormula::from_dimacs_clauses(2, &[&[1, 2]]));
        let mut tape = Tape::new();
        let u = tape.constant(crate::diff::Tensor::new(2, 2, vec![-std::f64::consts::LN_2; 4]));
        let f = compute_iteration_features(&mut tape, &g, u, u).unwrap().values(&tape);
        assert!((f.factor_entropy - 3f64.ln()).abs() < 1e-12);
        assert_eq!(f.energy, 0.0);
        assert_eq!(f.var_entropy, 0.0);
    }

    #[test]
    fn fused_attention_matches_reference_composition() {
        let g = graph(&small_formulas(1, 13)[0]);
        let cfg = ModelConfig { init: Init::SeededRandom { seed: 6 }, ..ModelConfig::default() };
        let model = Model::new(cfg.clone()).unwrap();
        let proj: Vec<f64> = (0..2 * g.f2v_pairs.len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let e = g.n_edges();
            let own = tape.constant(crate::diff::Tensor::new(
                e,
                2,
                (0..2 * e).map(|i| -(i as f64 * 0.1).sin().abs()).collect(),
            ));
            let src = tape.gather_rows(own, &g.f2v_pairs.source).unwrap();
            let out = if fused {
                gat_stack(&mut tape, &p, &cfg, "f2v", own, src, &g.f2v_pairs).unwrap()
            } else {
                gat_stack_reference(&mut tape, &p, &cfg, "f2v", own, src, &g.f2v_pairs).unwrap()
            };
            let w = tape.constant(crate::diff::Tensor::new(g.f2v_pairs.len(), 2, proj.clone()));
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum(prod);
            let grads = p.grads(&tape.backward(loss).unwrap());
            (tape.value(out).clone(), grads)
        };
        let (va, ga) = run(true);
        let (vb, gb) = run(false);
        for (x, y) in va.values.iter().zip(&vb.values) {
            assert!((x - y).abs() < 1e-12);
        }
        for (name, t) in ga.iter() {
            for (x, y) in t.values.iter().zip(&gb.get(name).unwrap().values) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn unit_only_formula_has_no_pairs() {
        let f = CnfFormula::from_dimacs_clauses(2, &[&[1], &[-2]]);
        let g = ModelGraph::new(FactorGraph::from_cnf(&f).unwrap());
        assert!(g.v2f_pairs.is_empty() && g.f2v_pairs.is_empty());
        let model = Model::new(ModelConfig::bp_equivalent(Variant::Bpgat, 3, 0.5)).unwrap();
        assert!(model.predict(&g).unwrap().ln_z.abs() < 1e-6);
    }
}
