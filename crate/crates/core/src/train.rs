//! Training, fine-tuning, evaluation and the ablation runner.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{estimate_ln_count, BpOptions};
use crate::datagen::DatasetRecord;
use crate::diff::ParamSet;
use crate::exact::count_dpll;
use crate::neural::{loss_and_grad, predict, DampingMode, Model, ModelConfig, ModelError, ModelGraph, Variant};

/// Records with `|ln Z|` below this are left out of relative-error means.
pub const MRE_ZERO_CUTOFF: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("record `{id}`: {message}")]
    Record { id: String, message: String },
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("parameter layouts differ")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1000, lr0: 1e-4, halve_every: 200, batch_size: 8, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size < 1 || self.halve_every < 1 {
            return bad("batch_size and halve_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam hyperparameters out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub n_examples: usize,
    pub pretrain_epochs: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { epochs: 250, lr: 1e-6, n_examples: 250, pretrain_epochs: 500 }
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every).min(i32::MAX as usize) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update, tensor by tensor in name order.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = &grads.get(&name).expect("same layout").values;
        let m = &mut state.m.get_mut(&name).expect("same layout").values;
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = &mut state.v.get_mut(&name).expect("same layout").values;
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = &state.m.get(&name).expect("same layout").values;
        let v = &state.v.get(&name).expect("same layout").values;
        let p = &mut params.get_mut(&name).expect("same layout").values;
        for i in 0..p.len() {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A dataset record with its factor graph built once.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub graph: ModelGraph,
    pub ln_count: f64,
}

pub fn prepare(records: &[DatasetRecord]) -> Result<Vec<Sample>, TrainError> {
    records
        .iter()
        .map(|r| {
            if !r.ln_count.is_finite() {
                return Err(TrainError::Record { id: r.id.clone(), message: "unlabeled or UNSAT".into() });
            }
            let graph = ModelGraph::from_cnf(&r.formula)
                .map_err(|e| TrainError::Record { id: r.id.clone(), message: e.to_string() })?;
            Ok(Sample { id: r.id.clone(), graph, ln_count: r.ln_count })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean squared error over the whole training set under the parameters
    /// held at the start of `epoch`.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// One row per epoch plus a final row for the trained parameters.
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.mean_loss)
    }
}

/// Mean squared log-count error of `model` over `samples`. Per-sample work
/// runs in parallel; the sum is taken in dataset order.
pub fn dataset_loss(model: &Model, samples: &[Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let errs: Vec<f64> = samples
        .par_iter()
        .map(|s| predict(&model.params, &model.config, &s.graph).map(|p| (p.ln_z - s.ln_count).powi(2)))
        .collect::<Result<_, _>>()
        .map_err(ModelError::from)?;
    Ok(errs.iter().sum::<f64>() / samples.len() as f64)
}

/// Per-epoch order of sample indices, drawn from a stream keyed by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch Adam on the batch-mean squared error of `ln Z`.
pub fn train(mut model: Model, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mean_loss = dataset_loss(&model, samples)?;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.push(HistoryRow { epoch, lr, mean_loss });
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, f64, ParamSet)> = batch
                .par_iter()
                .map(|&i| loss_and_grad(&model.params, &model.config, &samples[i].graph, samples[i].ln_count))
                .collect::<Result<_, _>>()
                .map_err(ModelError::from)?;
            let mut grad = model.params.zeros_like();
            for (loss, _, g) in &results {
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                grad.add_scaled(g, 1.0);
            }
            grad.scale(1.0 / batch.len() as f64);
            if !grad.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            adam_step(&mut model.params, &grad, &mut opt, lr, cfg)?;
        }
        if !model.params.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
    }
    let mean_loss = dataset_loss(&model, samples)?;
    if !mean_loss.is_finite() {
        return Err(TrainError::Diverged { epoch: cfg.epochs });
    }
    history.push(HistoryRow { epoch: cfg.epochs, lr: lr_at(cfg.epochs, cfg), mean_loss });
    Ok(TrainOutcome { model, history })
}

/// Continues training `model` at a fixed learning rate on the first
/// `n_examples` samples.
pub fn fine_tune(model: Model, samples: &[Sample], ft: &FineTuneConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    if ft.epochs < 1 || ft.n_examples < 1 {
        return Err(TrainError::Config("fine-tuning needs positive epochs and n_examples".into()));
    }
    if samples.len() < ft.n_examples {
        return Err(TrainError::Config(format!(
            "fine-tuning wants {} examples, dataset has {}",
            ft.n_examples,
            samples.len()
        )));
    }
    let cfg = TrainConfig { epochs: ft.epochs, lr0: ft.lr, halve_every: usize::MAX, seed, ..TrainConfig::default() };
    train(model, &samples[..ft.n_examples], &cfg)
}

pub fn write_history_csv(history: &[HistoryRow], mut w: impl Write) -> Result<(), TrainError> {
    let mut csv = csv::Writer::from_writer(&mut w);
    for row in history {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_history_csv(history: &[HistoryRow], path: &Path) -> Result<(), TrainError> {
    write_history_csv(history, fs::File::create(path)?)
}

/// What produces `ln Z` estimates for [`evaluate`].
#[derive(Debug, Clone)]
pub enum Predictor {
    Exact,
    Bp(BpOptions),
    Model(Box<Model>),
}

impl Predictor {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Exact => "exact",
            Predictor::Bp(_) => "bp",
            Predictor::Model(_) => "model",
        }
    }

    pub fn estimate(&self, record: &DatasetRecord) -> Result<f64, TrainError> {
        let rec_err = |message: String| TrainError::Record { id: record.id.clone(), message };
        match self {
            Predictor::Exact => {
                let c = count_dpll(&record.formula).map_err(|e| rec_err(e.to_string()))?;
                Ok(c.ln_count().unwrap_or(f64::NEG_INFINITY))
            }
            _ => {
                let g = ModelGraph::from_cnf(&record.formula).map_err(|e| rec_err(e.to_string()))?;
                self.estimate_graph(&g)
            }
        }
    }

    /// Estimate from a prebuilt graph; not available for [`Predictor::Exact`].
    pub fn estimate_graph(&self, graph: &ModelGraph) -> Result<f64, TrainError> {
        match self {
            Predictor::Exact => Err(TrainError::Config("exact counting needs the formula".into())),
            Predictor::Bp(opts) => Ok(estimate_ln_count(&graph.fg, opts).ln_z),
            Predictor::Model(m) => Ok(m.predict(graph)?.ln_z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub ln_z: f64,
    pub ln_z_hat: f64,
    pub abs_error: f64,
    /// `None` when `|ln Z|` is below [`MRE_ZERO_CUTOFF`].
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<ModelConfig>,
    pub n: usize,
    pub rmse: f64,
    pub mre: f64,
    /// Records left out of `mre` because `ln Z` is (numerically) zero.
    pub n_excluded_from_mre: usize,
    pub per_instance: Vec<InstanceResult>,
    pub wall_time_per_instance: f64,
}

impl EvalReport {
    /// The `RMSE/MRE` cell used in result tables.
    pub fn cell(&self) -> String {
        format!("{:.4}/{:.6}", self.rmse, self.mre)
    }
}

/// RMSE and MRE of `(ln Z, ln Z_hat)` pairs; `mre` is 0 when every `ln Z`
/// is excluded.
pub fn metrics(pairs: &[(f64, f64)]) -> (f64, f64, usize) {
    let n = pairs.len() as f64;
    let rmse = (pairs.iter().map(|(z, h)| (h - z).powi(2)).sum::<f64>() / n).sqrt();
    let rel: Vec<f64> =
        pairs.iter().filter(|(z, _)| z.abs() >= MRE_ZERO_CUTOFF).map(|(z, h)| (h - z).abs() / z.abs()).collect();
    let mre = if rel.is_empty() { 0.0 } else { rel.iter().sum::<f64>() / rel.len() as f64 };
    (rmse, mre, pairs.len() - rel.len())
}

pub fn evaluate(predictor: &Predictor, records: &[DatasetRecord]) -> Result<EvalReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let estimates: Vec<f64> = records.par_iter().map(|r| predictor.estimate(r)).collect::<Result<_, _>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(report(predictor, records.iter().map(|r| (r.id.as_str(), r.ln_count)), &estimates, elapsed))
}

/// [`evaluate`] over prepared samples, reusing their factor graphs.
pub fn evaluate_samples(predictor: &Predictor, samples: &[Sample]) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let estimates: Vec<f64> =
        samples.par_iter().map(|s| predictor.estimate_graph(&s.graph)).collect::<Result<_, _>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(report(predictor, samples.iter().map(|s| (s.id.as_str(), s.ln_count)), &estimates, elapsed))
}

fn report<'a>(
    predictor: &Predictor,
    labels: impl Iterator<Item = (&'a str, f64)>,
    estimates: &[f64],
    elapsed: f64,
) -> EvalReport {
    let per_instance: Vec<InstanceResult> = labels
        .zip(estimates)
        .map(|((id, z), &h)| InstanceResult {
            id: id.to_string(),
            ln_z: z,
            ln_z_hat: h,
            abs_error: (h - z).abs(),
            rel_error: (z.abs() >= MRE_ZERO_CUTOFF).then(|| (h - z).abs() / z.abs()),
        })
        .collect();
    let pairs: Vec<(f64, f64)> = per_instance.iter().map(|r| (r.ln_z, r.ln_z_hat)).collect();
    let (rmse, mre, excluded) = metrics(&pairs);
    EvalReport {
        predictor: predictor.name().to_string(),
        config: match predictor {
            Predictor::Model(m) => Some(m.config.clone()),
            _ => None,
        },
        n: per_instance.len(),
        rmse,
        mre,
        n_excluded_from_mre: excluded,
        per_instance,
        wall_time_per_instance: elapsed / estimates.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub config_id: String,
    pub config: ModelConfig,
}

/// The damping, hybrid, iteration-count and BPNN-versus-BPGAT sweeps, each
/// a variation of `base`.
pub fn ablation_matrix(base: &ModelConfig) -> Vec<AblationEntry> {
    let mut out = Vec::new();
    for mode in DampingMode::ALL {
        out.push(AblationEntry {
            config_id: format!("damping-{mode}"),
            config: ModelConfig { damping_mode: mode, ..base.clone() },
        });
    }
    for v in [Variant::FvgatVfnone, Variant::FvnoneVfgat, Variant::FvgatVfmlp, Variant::FvmlpVfgat] {
        out.push(AblationEntry {
            config_id: format!("hybrid-{v}"),
            config: ModelConfig { variant: v, ..base.clone() },
        });
    }
    for t in [5, 10, 15] {
        out.push(AblationEntry { config_id: format!("iters-{t}"), config: ModelConfig { t, ..base.clone() } });
    }
    for v in [Variant::Bpgat, Variant::Bpnn] {
        out.push(AblationEntry { config_id: format!("arch-{v}"), config: ModelConfig { variant: v, ..base.clone() } });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_id: String,
    pub variant: Variant,
    pub damping: DampingMode,
    #[serde(rename = "T")]
    pub t: usize,
    pub rmse: f64,
    pub mre: f64,
}

/// Trains every entry under the same data and `TrainConfig` and evaluates it
/// on `test`. Writes `ablation.csv` and `ablation.json` into `out_dir` when
/// given.
pub fn run_ablation(
    matrix: &[AblationEntry],
    train_set: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(matrix.len());
    for entry in matrix {
        let model = Model::new(entry.config.clone())?;
        let outcome = train(model, train_set, cfg)?;
        let rep = evaluate_samples(&Predictor::Model(Box::new(outcome.model)), test)?;
        rows.push(AblationRow {
            config_id: entry.config_id.clone(),
            variant: entry.config.variant,
            damping: entry.config.damping_mode,
            t: entry.config.t,
            rmse: rep.rmse,
            mre: rep.mre,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_ablation_csv(&rows, fs::File::create(dir.join("ablation.csv"))?)?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], w: impl Write) -> Result<(), TrainError> {
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::{Clause, CnfFormula, Literal};
    use crate::datagen::{build_labeled_dataset, GenParams, LabelOptions};
    use crate::diff::Tensor;
    use crate::neural::Init;

    fn tiny_records(n: usize, seed: u64) -> Vec<DatasetRecord> {
        build_labeled_dataset(&GenParams::with_ranges((3, 6), (3, 6), seed), n, LabelOptions::default()).unwrap()
    }

    fn scalar_params(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn x_of(p: &ParamSet) -> f64 {
        p.get("x").unwrap().values[0]
    }

    fn quick(epochs: usize, lr0: f64) -> TrainConfig {
        TrainConfig { epochs, lr0, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(1.0), &mut st, 0.1, &TrainConfig::default()).unwrap();
        assert!((x_of(&p) + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{}", x_of(&p));
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(3.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(0.0), &mut st, 0.1, &cfg).unwrap();
        assert_eq!(x_of(&p), 3.0);

        adam_step(&mut p, &scalar_params(2.0), &mut st, 0.0, &cfg).unwrap();
        let (m, v) = (x_of(&st.m), x_of(&st.v));
        adam_step(&mut p, &scalar_params(0.0), &mut st, 0.0, &cfg).unwrap();
        assert_eq!(x_of(&p), 3.0);
        assert_eq!(x_of(&st.m), 0.9 * m);
        assert_eq!(x_of(&st.v), 0.999 * v);
    }

    #[test]
    fn adam_is_deterministic_and_checks_layout() {
        let run = || {
            let mut p = scalar_params(1.0);
            let mut st = AdamState::new(&p);
            for i in 0..10 {
                let g = scalar_params((i as f64 * 0.7).sin());
                adam_step(&mut p, &g, &mut st, 0.01, &TrainConfig::default()).unwrap();
            }
            x_of(&p)
        };
        assert_eq!(run().to_bits(), run().to_bits());
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        let mut other = ParamSet::new();
        other.insert("y", Tensor::scalar(1.0));
        assert!(matches!(
            adam_step(&mut p, &other, &mut st, 0.1, &TrainConfig::default()),
            Err(TrainError::ShapeMismatch)
        ));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(199, &cfg), 1e-4);
        assert_eq!(lr_at(450, &cfg), 2.5e-5);
        assert_eq!(lr_at(999, &cfg), 6.25e-6);
        let flat = TrainConfig { halve_every: usize::MAX, ..cfg };
        assert_eq!(lr_at(usize::MAX - 1, &flat), 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr0: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn metrics_example() {
        let (rmse, mre, excluded) = metrics(&[(2.0, 2.2), (4.0, 3.8)]);
        assert!((rmse - 0.2).abs() < 1e-12);
        assert!((mre - 0.075).abs() < 1e-12);
        assert_eq!(excluded, 0);
        let (rmse, mre, excluded) = metrics(&[(0.0, 0.5), (1.0, 1.0)]);
        assert!((rmse - 0.125f64.sqrt()).abs() < 1e-12);
        assert_eq!(mre, 0.0);
        assert_eq!(excluded, 1);
    }

    #[test]
    fn exact_predictor_matches_its_labels() {
        let recs = tiny_records(10, 1);
        let rep = evaluate(&Predictor::Exact, &recs).unwrap();
        assert!(rep.rmse < 1e-9 && rep.mre < 1e-9);
        assert_eq!(rep.cell(), "0.0000/0.000000");
        assert_eq!(rep.per_instance.len(), 10);
        assert!(evaluate(&Predictor::Exact, &[]).is_err());
    }

    #[test]
    fn bp_is_exact_on_tree_datasets() {
        // Chains of binary clauses sharing one variable with the next.
        let recs: Vec<DatasetRecord> = (2..12u32)
            .map(|n| {
                let clauses =
                    (1..n).map(|v| Clause::new(vec![Literal::new(v, v % 2 == 0), Literal::new(v + 1, true)])).collect();
                let f = CnfFormula::new(n, clauses);
                let ln = count_dpll(&f).unwrap().ln_count().unwrap();
                DatasetRecord::new(format!("chain-{n}"), f, ln)
            })
            .collect();
        let opts = BpOptions { max_iters: 200, ..BpOptions::default() };
        let rep = evaluate(&Predictor::Bp(opts), &recs).unwrap();
        assert!(rep.rmse < 1e-6, "{}", rep.rmse);
    }

    #[test]
    fn rmse_dominates_mean_abs_error() {
        let recs = tiny_records(12, 2);
        let model = Model::new(ModelConfig::default()).unwrap();
        for p in [Predictor::Bp(BpOptions::default()), Predictor::Model(Box::new(model))] {
            let rep = evaluate(&p, &recs).unwrap();
            let mae = rep.per_instance.iter().map(|r| r.abs_error).sum::<f64>() / rep.n as f64;
            assert!(rep.rmse >= mae - 1e-15 && rep.mre >= 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_everything() {
        let samples = prepare(&tiny_records(10, 3)).unwrap();
        let model = Model::new(ModelConfig::default()).unwrap();
        let out = train(model.clone(), &samples, &quick(3, 0.0)).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.history.len(), 4);
        let first = out.history[0].mean_loss;
        assert!(out.history.iter().all(|r| r.mean_loss == first));

        let ft = FineTuneConfig { epochs: 2, lr: 0.0, n_examples: 5, pretrain_epochs: 1 };
        let tuned = fine_tune(model.clone(), &samples, &ft, 0).unwrap();
        assert_eq!(tuned.model.params, model.params);
        assert!(fine_tune(model, &samples, &FineTuneConfig { n_examples: 11, ..ft }, 0).is_err());
    }

    #[test]
    fn training_is_deterministic_and_history_is_reproducible() {
        let samples = prepare(&tiny_records(12, 4)).unwrap();
        let cfg = quick(3, 1e-3);
        let model = Model::new(ModelConfig::with_variant(Variant::Bpnn)).unwrap();
        let a = train(model.clone(), &samples, &cfg).unwrap();
        let b = train(model.clone(), &samples, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);

        // The row for epoch e is the loss of the parameters after e epochs.
        let after_two = train(model, &samples, &TrainConfig { epochs: 2, ..cfg }).unwrap();
        let reloaded = Model::from_json(&after_two.model.to_json().unwrap()).unwrap();
        let loss = dataset_loss(&reloaded, &samples).unwrap();
        assert!((loss - a.history[2].mean_loss).abs() < 1e-12);
        assert_eq!(after_two.final_loss(), a.history[2].mean_loss);
    }

    #[test]
    fn training_reduces_loss() {
        let samples = prepare(&tiny_records(20, 5)).unwrap();
        let model = Model::new(ModelConfig { t: 3, ..ModelConfig::default() }).unwrap();
        let out = train(model, &samples, &quick(50, 1e-3)).unwrap();
        let first = out.history[0].mean_loss;
        assert!(out.final_loss() < first, "{} -> {}", first, out.final_loss());
    }

    #[test]
    fn fine_tuning_on_the_same_data_is_stable() {
        let samples = prepare(&tiny_records(16, 6)).unwrap();
        let model = Model::new(ModelConfig { t: 3, ..ModelConfig::with_variant(Variant::Bpnn) }).unwrap();
        let pre = train(model, &samples, &quick(20, 1e-3)).unwrap();
        let before = dataset_loss(&pre.model, &samples).unwrap();
        let ft = FineTuneConfig { epochs: 10, lr: 1e-6, n_examples: 16, pretrain_epochs: 20 };
        let tuned = fine_tune(pre.model, &samples, &ft, 1).unwrap();
        assert!(tuned.final_loss() <= before * 1.1);
    }

    #[test]
    fn unlabeled_records_are_rejected() {
        let mut recs = tiny_records(2, 7);
        recs[1].ln_count = f64::NEG_INFINITY;
        assert!(matches!(prepare(&recs), Err(TrainError::Record { .. })));
        assert!(matches!(
            train(Model::new(ModelConfig::default()).unwrap(), &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn history_csv_layout() {
        let rows =
            [HistoryRow { epoch: 0, lr: 1e-4, mean_loss: 2.5 }, HistoryRow { epoch: 1, lr: 5e-5, mean_loss: 1.0 }];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,lr,mean_loss\n0,0.0001,2.5\n1,0.00005,1.0\n");
    }

    #[test]
    fn ablation_matrix_covers_every_sweep() {
        let m = ablation_matrix(&ModelConfig::default());
        assert_eq!(m.len(), 13);
        assert_eq!(m.iter().filter(|e| e.config_id.starts_with("damping-")).count(), 4);
        assert_eq!(m.iter().filter(|e| e.config_id.starts_with("hybrid-")).count(), 4);
        let ts: Vec<usize> = m.iter().filter(|e| e.config_id.starts_with("iters-")).map(|e| e.config.t).collect();
        assert_eq!(ts, [5, 10, 15]);
        assert!(m.iter().all(|e| e.config.validate().is_ok()));
    }

    #[test]
    fn ablation_tables() {
        let recs = tiny_records(12, 8);
        let samples = prepare(&recs).unwrap();
        let (tr, te) = samples.split_at(8);
        let base = ModelConfig { t: 2, init: Init::SeededRandom { seed: 1 }, ..ModelConfig::default() };
        let cfg = quick(2, 1e-3);
        let damping: Vec<_> =
            ablation_matrix(&base).into_iter().filter(|e| e.config_id.starts_with("damping-")).collect();
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(&damping, tr, te, &cfg, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 4);
        let csv_text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(lines.next(), Some("config_id,variant,damping,T,rmse,mre"));
        assert_eq!(lines.count(), 4);
        assert!(lines_parse_as_json(&dir.path().join("ablation.json")));

        let iters: Vec<_> = ablation_matrix(&ModelConfig { t: 2, ..base.clone() })
            .into_iter()
            .filter(|e| e.config_id.starts_with("iters-"))
            .map(|e| AblationEntry { config: ModelConfig { t: e.config.t / 5, ..e.config }, ..e })
            .collect();
        let a = run_ablation(&iters, tr, te, &cfg, None).unwrap();
        let b = run_ablation(&iters, tr, te, &cfg, None).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    fn lines_parse_as_json(path: &Path) -> bool {
        let rows: Vec<AblationRow> = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        rows.len() == 4
    }
}
