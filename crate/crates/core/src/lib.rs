//! Approximate propositional model counting with learned belief propagation.

pub mod bp;
pub mod cnf;
pub mod datagen;
pub mod diff;
pub mod exact;
pub mod factor_graph;
pub mod math;
pub mod neural;
pub mod train;

pub use bp::{BpEstimate, BpOptions, MessageState};
pub use cnf::{parse_dimacs, write_dimacs, Clause, CnfError, CnfFormula, Literal};
pub use datagen::{DatasetRecord, GenParams, Graph};
pub use exact::{count_bruteforce, count_dpll, is_satisfiable, ExactCount};
pub use factor_graph::{FactorGraph, NEG_SENTINEL};
pub use neural::{DampingMode, Model, ModelConfig, ModelGraph, Variant};
pub use train::{evaluate, train, EvalReport, FineTuneConfig, Predictor, TrainConfig};
