//! Random formula generators, graph-coloring encodings and labeled datasets.
//!
//! All randomness flows through [`Rng`] (ChaCha8), which produces the same
//! stream on every platform for a given seed, so a `(params, seed)` pair
//! always yields byte-identical datasets.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::time::Duration;

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{parse_dimacs, Clause, CnfError, CnfFormula, Literal};
use crate::exact::{count_dpll_with, CountError, CountOptions};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Consecutive duplicate draws tolerated for one clause before the formula is
/// truncated.
pub const MAX_DUPLICATE_REJECTIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("labeling budget exhausted after {attempts} attempts ({accepted} records accepted, {timeouts} timeouts)")]
    BudgetExhausted { attempts: usize, accepted: usize, timeouts: usize },
    #[error("dataset line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("dataset line {line}: {source}")]
    Dimacs { line: usize, source: CnfError },
    #[error("dataset line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub nv_min: u32,
    pub nv_max: u32,
    pub nc_min: u32,
    pub nc_max: u32,
    pub bern_p: f64,
    pub geom_p: f64,
    pub max_clause_len: u32,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { nv_min: 10, nv_max: 30, nc_min: 20, nc_max: 50, bern_p: 0.7, geom_p: 0.4, max_clause_len: 16, seed: 0 }
    }
}

impl GenParams {
    pub fn with_ranges(nv: (u32, u32), nc: (u32, u32), seed: u64) -> Self {
        Self { nv_min: nv.0, nv_max: nv.1, nc_min: nc.0, nc_max: nc.1, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidParams(m.to_string()));
        if self.nv_min < 1 || self.nv_min > self.nv_max {
            return bad("require 1 <= nv_min <= nv_max");
        }
        if self.nc_min < 1 || self.nc_min > self.nc_max {
            return bad("require 1 <= nc_min <= nc_max");
        }
        for p in [self.bern_p, self.geom_p] {
            if !(p > 0.0 && p < 1.0) {
                return bad("probabilities must lie in (0, 1)");
            }
        }
        if self.max_clause_len < 3 {
            return bad("max_clause_len must be at least 3");
        }
        Ok(())
    }
}

/// `2 + Bernoulli(bern_p) + Geometric(geom_p)` with the geometric counted in
/// trials (support `1, 2, ...`), redrawn while above `max_clause_len`.
pub fn sample_clause_length(params: &GenParams, rng: &mut Rng) -> u32 {
    let bern = Bernoulli::new(params.bern_p).expect("validated probability");
    let geom = Geometric::new(params.geom_p).expect("validated probability");
    loop {
        // rand_distr's Geometric counts failures before the first success.
        let trials = geom.sample(rng).saturating_add(1);
        let k = 2 + bern.sample(rng) as u64 + trials;
        if k <= params.max_clause_len as u64 {
            return k as u32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFormula {
    pub formula: CnfFormula,
    /// Set when clause generation gave up on duplicates and stopped early.
    pub truncated: bool,
}

pub fn sample_random_formula(params: &GenParams, rng: &mut Rng) -> RandomFormula {
    let n_vars = rng.random_range(params.nv_min..=params.nv_max);
    let n_clauses = rng.random_range(params.nc_min..=params.nc_max) as usize;
    let mut seen: HashSet<Vec<Literal>> = HashSet::with_capacity(n_clauses);
    let mut clauses = Vec::with_capacity(n_clauses);
    let mut truncated = false;

    'clauses: for _ in 0..n_clauses {
        let mut rejections = 0;
        loop {
            let k = sample_clause_length(params, rng).min(n_vars) as usize;
            let vars = index::sample(rng, n_vars as usize, k);
            let clause = Clause::new(vars.iter().map(|v| Literal::new(v as u32 + 1, rng.random_bool(0.5))).collect());
            if seen.insert(clause.key()) {
                clauses.push(clause);
                break;
            }
            rejections += 1;
            if rejections >= MAX_DUPLICATE_REJECTIONS {
                truncated = true;
                break 'clauses;
            }
        }
    }
    RandomFormula { formula: CnfFormula::new(n_vars, clauses), truncated }
}

/// Undirected simple graph over nodes `0..n_nodes`; edges stored as `(u, v)`
/// with `u < v`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub n_nodes: u32,
    pub edges: Vec<(u32, u32)>,
}

impl Graph {
    pub fn new(n_nodes: u32, edges: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut edges: Vec<(u32, u32)> =
            edges.into_iter().filter(|(u, v)| u != v).map(|(u, v)| (u.min(v), u.max(v))).collect();
        edges.sort_unstable();
        edges.dedup();
        assert!(edges.iter().all(|&(_, v)| v < n_nodes), "edge endpoint out of range");
        Self { n_nodes, edges }
    }

    pub fn complete(n: u32) -> Self {
        Self::new(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))))
    }

    pub fn has_triangle(&self) -> bool {
        let set: HashSet<(u32, u32)> = self.edges.iter().copied().collect();
        self.edges.iter().any(|&(u, v)| (v + 1..self.n_nodes).any(|w| set.contains(&(u, w)) && set.contains(&(v, w))))
    }
}

pub fn sample_erdos_renyi(n: u32, p: f64, rng: &mut Rng) -> Graph {
    assert!(n >= 1, "graph needs at least one node");
    assert!((0.0..=1.0).contains(&p), "edge probability must lie in [0, 1]");
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph { n_nodes: n, edges }
}

/// Variable for "node `v` has color `c`" (both 0-based); 1-based DIMACS index.
pub fn color_var(v: u32, c: u32, k: u32) -> u32 {
    v * k + c + 1
}

/// CNF whose models are exactly the proper `k`-colorings of `g`: one
/// at-least-one clause per node, pairwise at-most-one clauses per node, and
/// one not-both clause per edge and color.
pub fn encode_k_coloring(g: &Graph, k: u32) -> CnfFormula {
    assert!(k >= 1, "need at least one color");
    let mut clauses = Vec::new();
    for v in 0..g.n_nodes {
        clauses.push(Clause::new((0..k).map(|c| Literal::pos(color_var(v, c, k))).collect()));
        for c1 in 0..k {
            for c2 in c1 + 1..k {
                clauses.push(Clause::new(vec![Literal::neg(color_var(v, c1, k)), Literal::neg(color_var(v, c2, k))]));
            }
        }
    }
    for &(u, v) in &g.edges {
        for c in 0..k {
            clauses.push(Clause::new(vec![Literal::neg(color_var(u, c, k)), Literal::neg(color_var(v, c, k))]));
        }
    }
    CnfFormula::new(g.n_nodes * k, clauses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoringParams {
    pub n_min: u32,
    pub n_max: u32,
    pub edge_p: f64,
    pub k: u32,
}

impl ColoringParams {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(DatagenError::InvalidParams("require 1 <= n_min <= n_max".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_p) {
            return Err(DatagenError::InvalidParams("edge probability must lie in [0, 1]".into()));
        }
        if self.k < 1 {
            return Err(DatagenError::InvalidParams("k must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn sample_coloring_formula(params: &ColoringParams, rng: &mut Rng) -> CnfFormula {
    let n = rng.random_range(params.n_min..=params.n_max);
    let g = sample_erdos_renyi(n, params.edge_p, rng);
    encode_k_coloring(&g, params.k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub formula: CnfFormula,
    pub n_vars: u32,
    pub n_clauses: usize,
    pub ln_count: f64,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, formula: CnfFormula, ln_count: f64) -> Self {
        Self { id: id.into(), n_vars: formula.n_vars, n_clauses: formula.n_clauses(), formula, ln_count }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    dimacs: String,
    n_vars: u32,
    n_clauses: usize,
    ln_count: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LabelOptions {
    /// Per-formula budget for the exact counter.
    pub timeout: Duration,
    /// Give up once this many candidates have been drawn in total, as a
    /// multiple of the requested record count.
    pub max_attempts_factor: usize,
    /// Give up after this many consecutive labeling timeouts.
    pub max_consecutive_timeouts: usize,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(10), max_attempts_factor: 100, max_consecutive_timeouts: 50 }
    }
}

/// Candidates drawn per labeling round. Fixed so that the output does not
/// depend on the number of worker threads.
const LABEL_CHUNK: usize = 32;

/// Draws candidates from `sampler` and keeps the satisfiable ones, labeled
/// with their exact log model count, until `target_count` are collected.
/// Records are ordered (and named) by generation index.
pub fn label_formulas<F>(
    target_count: usize,
    id_prefix: &str,
    opts: LabelOptions,
    rng: &mut Rng,
    mut sampler: F,
) -> Result<Vec<DatasetRecord>, DatagenError>
where
    F: FnMut(&mut Rng) -> CnfFormula,
{
    if target_count == 0 {
        return Err(DatagenError::InvalidParams("target count must be at least 1".into()));
    }
    let max_attempts = target_count.saturating_mul(opts.max_attempts_factor.max(1));
    let count_opts = CountOptions::with_timeout(opts.timeout);
    let mut records = Vec::with_capacity(target_count);
    let mut attempts = 0usize;
    let mut timeouts = 0usize;
    let mut consecutive_timeouts = 0usize;

    while records.len() < target_count {
        if attempts >= max_attempts {
            return Err(DatagenError::BudgetExhausted { attempts, accepted: records.len(), timeouts });
        }
        let chunk: Vec<(usize, CnfFormula)> =
            (0..LABEL_CHUNK).map(|i| (attempts + i, sampler(rng).normalize())).collect();
        attempts += LABEL_CHUNK;
        let labeled: Vec<Result<_, CountError>> =
            chunk.par_iter().map(|(_, f)| count_dpll_with(f, count_opts).map(|c| c.ln_count())).collect();
        for ((index, formula), label) in chunk.into_iter().zip(labeled) {
            if records.len() == target_count {
                break;
            }
            match label {
                Ok(Some(ln_count)) => {
                    consecutive_timeouts = 0;
                    records.push(DatasetRecord::new(format!("{id_prefix}-{index:06}"), formula, ln_count));
                }
                Ok(None) => consecutive_timeouts = 0,
                Err(CountError::Timeout(_)) => {
                    timeouts += 1;
                    consecutive_timeouts += 1;
                    if consecutive_timeouts >= opts.max_consecutive_timeouts {
                        return Err(DatagenError::BudgetExhausted { attempts, accepted: records.len(), timeouts });
                    }
                }
                Err(CountError::TooLarge { .. }) => unreachable!("DPLL has no size bound"),
            }
        }
    }
    Ok(records)
}

/// Labeled dataset from the random-formula distribution; the RNG is seeded
/// from `params.seed`.
pub fn build_labeled_dataset(
    params: &GenParams,
    target_count: usize,
    opts: LabelOptions,
) -> Result<Vec<DatasetRecord>, DatagenError> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    label_formulas(target_count, "rand", opts, &mut rng, |rng| sample_random_formula(params, rng).formula)
}

pub fn build_coloring_dataset(
    params: &ColoringParams,
    target_count: usize,
    seed: u64,
    opts: LabelOptions,
) -> Result<Vec<DatasetRecord>, DatagenError> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    label_formulas(target_count, "color", opts, &mut rng, |rng| sample_coloring_formula(params, rng))
}

pub fn write_jsonl<W: Write>(records: &[DatasetRecord], mut out: W) -> Result<(), DatagenError> {
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            dimacs: r.formula.to_dimacs(),
            n_vars: r.n_vars,
            n_clauses: r.n_clauses,
            ln_count: r.ln_count,
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>, DatagenError> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|source| DatagenError::Json { line: line_no, source })?;
        let formula = parse_dimacs(&rec.dimacs).map_err(|source| DatagenError::Dimacs { line: line_no, source })?;
        let schema = |message: String| DatagenError::Schema { line: line_no, message };
        if formula.n_vars != rec.n_vars || formula.n_clauses() != rec.n_clauses {
            return Err(schema(format!(
                "header says {} vars / {} clauses, fields say {} / {}",
                formula.n_vars,
                formula.n_clauses(),
                rec.n_vars,
                rec.n_clauses
            )));
        }
        if !rec.ln_count.is_finite() {
            return Err(schema("ln_count must be finite".into()));
        }
        records.push(DatasetRecord {
            id: rec.id,
            formula,
            n_vars: rec.n_vars,
            n_clauses: rec.n_clauses,
            ln_count: rec.ln_count,
        });
    }
    Ok(records)
}

pub fn save_jsonl(records: &[DatasetRecord], path: &std::path::Path) -> Result<(), DatagenError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<DatasetRecord>, DatagenError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

/// Column means over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub count: usize,
    pub mean_vars: f64,
    pub mean_clauses: f64,
    pub mean_ln_count: f64,
}

impl DatasetSummary {
    pub fn of(records: &[DatasetRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            count: records.len(),
            mean_vars: records.iter().map(|r| r.n_vars as f64).sum::<f64>() / n,
            mean_clauses: records.iter().map(|r| r.n_clauses as f64).sum::<f64>() / n,
            mean_ln_count: records.iter().map(|r| r.ln_count).sum::<f64>() / n,
        }
    }
}
