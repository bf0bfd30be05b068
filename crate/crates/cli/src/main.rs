//! `bpgat`: generate labeled CNF datasets, count models exactly or
//! approximately, and train, fine-tune, evaluate and ablate neural BP models.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use bpgat::bp::{estimate_ln_count, BpOptions};
use bpgat::cnf::parse_dimacs;
use bpgat::datagen::{
    build_coloring_dataset, build_labeled_dataset, load_jsonl, save_jsonl, ColoringParams, DatagenError, DatasetRecord,
    DatasetSummary, GenParams, LabelOptions,
};
use bpgat::exact::{count_dpll_with, CountError, CountOptions};
use bpgat::neural::{DampingMode, Init, Model, ModelConfig, ModelError, ModelGraph, Readout, Variant};
use bpgat::train::{
    ablation_matrix, evaluate, fine_tune, prepare, run_ablation, save_history_csv, train, AblationEntry,
    FineTuneConfig, Predictor, TrainConfig, TrainError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use output::{emit, Format};

const EXIT_USAGE: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_UNSAT: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "bpgat", version, about = "Approximate model counting with learned belief propagation")]
struct Cli {
    /// Seed for generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file (or directory for `ablate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled JSONL dataset of satisfiable formulae.
    GenData(GenDataArgs),
    /// Count the models of a DIMACS file.
    Count(CountArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint at a fixed learning rate.
    Finetune(FinetuneArgs),
    /// Report RMSE/MRE of a predictor on a labeled dataset.
    Eval(EvalArgs),
    /// Train and evaluate every configuration of an ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Random,
    Coloring,
}

#[derive(Args)]
struct GenDataArgs {
    /// Variable-count range `min:max`.
    #[arg(long, default_value = "10:30")]
    nv: String,
    /// Clause-count range `min:max`.
    #[arg(long, default_value = "20:50")]
    nc: String,
    #[arg(long)]
    count: usize,
    #[arg(long, value_enum, default_value_t = Dist::Random)]
    dist: Dist,
    /// Node-count range (or a single count) of coloring graphs.
    #[arg(long, default_value = "3:8")]
    graph_n: String,
    /// Edge probability of coloring graphs.
    #[arg(long, default_value_t = 0.5)]
    graph_p: f64,
    /// Number of colors.
    #[arg(long, default_value_t = 3)]
    k: u32,
    /// Per-formula labeling budget in seconds.
    #[arg(long, default_value_t = 10.0)]
    timeout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountMethod {
    Exact,
    Bp,
    Model,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = CountMethod::Exact)]
    method: CountMethod,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// BP iterations.
    #[arg(long = "T", default_value_t = 5)]
    t: usize,
    /// BP damping weight on the new message.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Exact-counting budget in seconds.
    #[arg(long)]
    timeout: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Random,
    BpIdentity,
}

#[derive(Args)]
struct ModelArgs {
    /// Full model configuration as JSON; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "bpgat")]
    variant: Variant,
    #[arg(long = "T", default_value_t = 5)]
    t: usize,
    #[arg(long, default_value = "delta_f2v")]
    damping: DampingMode,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = InitKind::Random)]
    init: InitKind,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    halve_every: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Loss history CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    n_examples: usize,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMethod {
    Model,
    Bp,
    Exact,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalMethod::Model)]
    method: EvalMethod,
    /// BP iterations for `--method bp`.
    #[arg(long = "T", default_value_t = 5)]
    t: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON list of `{"config_id", "config"}` entries; the full default
    /// matrix when omitted.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; the last fifth of `--data` when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    halve_every: usize,
    /// Write the default matrix to `--out` and exit.
    #[arg(long)]
    emit_matrix: bool,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure { code: classify(&error), error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

fn classify(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<DatagenError>() {
            return match e {
                DatagenError::BudgetExhausted { .. } => EXIT_BUDGET,
                DatagenError::Io(_) => 1,
                _ => EXIT_USAGE,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Diverged { .. } => return EXIT_DIVERGED,
                TrainError::Io(_) | TrainError::Csv(_) | TrainError::Json(_) => return 1,
                TrainError::Model(_) => continue,
                _ => return EXIT_USAGE,
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::Io(_) => 1,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<CountError>().is_some() {
            return EXIT_BUDGET;
        }
    }
    1
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    seed: u64,
    format: Format,
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    let ctx = Ctx { seed: cli.seed, format: cli.format, out: cli.out };
    let result = pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Count(a) => count(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Finetune(a) => finetune_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// `a:b` or a single value `a`.
fn parse_range(s: &str, what: &str) -> Result<(u32, u32), Failure> {
    let bad = || usage(anyhow!("invalid {what} range `{s}`; expected `min:max`"));
    let (a, b) = match s.split_once(':') {
        Some((a, b)) => (a, b),
        None => (s, s),
    };
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok((a, b))
}

fn budget(secs: f64) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(secs).map_err(|_| usage(anyhow!("invalid time budget {secs}")))
}

fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, Failure> {
    load_jsonl(path).with_context(|| format!("reading dataset {}", path.display())).map_err(usage)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Model::load(path).with_context(|| format!("reading checkpoint {}", path.display())).map_err(usage)
}

fn out_path(ctx: &Ctx, default: &str) -> PathBuf {
    ctx.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn history_path(ckpt: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| ckpt.with_extension("loss.csv"))
}

#[derive(Serialize)]
struct GenSummary {
    path: String,
    count: usize,
    mean_vars: f64,
    mean_clauses: f64,
    mean_ln_count: f64,
    /// Labeling wall time per stored record.
    mean_label_seconds: f64,
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CmdResult {
    if a.count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    let opts = LabelOptions { timeout: budget(a.timeout)?, ..LabelOptions::default() };
    let start = Instant::now();
    let records = match a.dist {
        Dist::Random => {
            let (nv, nc) = (parse_range(&a.nv, "--nv")?, parse_range(&a.nc, "--nc")?);
            build_labeled_dataset(&GenParams::with_ranges(nv, nc, ctx.seed), a.count, opts)?
        }
        Dist::Coloring => {
            let (n_min, n_max) = parse_range(&a.graph_n, "--graph-n")?;
            let params = ColoringParams { n_min, n_max, edge_p: a.graph_p, k: a.k };
            build_coloring_dataset(&params, a.count, ctx.seed, opts)?
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let path = out_path(ctx, "data.jsonl");
    save_jsonl(&records, &path)?;
    let s = DatasetSummary::of(&records);
    emit(
        ctx.format,
        &GenSummary {
            path: path.display().to_string(),
            count: s.count,
            mean_vars: s.mean_vars,
            mean_clauses: s.mean_clauses,
            mean_ln_count: s.mean_ln_count,
            mean_label_seconds: elapsed / records.len() as f64,
        },
    )
}

fn count(ctx: &Ctx, a: CountArgs) -> CmdResult {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display())).map_err(usage)?;
    let formula =
        parse_dimacs(&text).with_context(|| format!("parsing {}", a.input.display())).map_err(usage)?.normalize();
    match a.method {
        CountMethod::Exact => {
            let mut opts = CountOptions::default();
            if let Some(t) = a.timeout {
                opts = CountOptions::with_timeout(budget(t)?);
            }
            let c = count_dpll_with(&formula, opts)?;
            let count = match u64::try_from(&c.count) {
                Ok(n) => json!(n),
                Err(_) => json!(c.count.to_string()),
            };
            emit(ctx.format, &json!({ "ln_count": c.ln_count(), "count": count }))?;
            if c.is_zero() {
                return Err(Failure { code: EXIT_UNSAT, error: anyhow!("formula is unsatisfiable") });
            }
            Ok(())
        }
        CountMethod::Bp => {
            if a.t < 1 || !(0.0..=1.0).contains(&a.alpha) {
                return Err(usage(anyhow!("--T must be positive and --alpha in [0, 1]")));
            }
            let graph = ModelGraph::from_cnf(&formula).map_err(|e| usage(e.into()))?;
            let est =
                estimate_ln_count(&graph.fg, &BpOptions { max_iters: a.t, damping: a.alpha, ..BpOptions::default() });
            emit(ctx.format, &json!({ "ln_count": est.ln_z, "converged": est.converged }))
        }
        CountMethod::Model => {
            let path = a.ckpt.ok_or_else(|| usage(anyhow!("--method model needs --ckpt")))?;
            let model = load_model(&path)?;
            let graph = ModelGraph::from_cnf(&formula).map_err(|e| usage(e.into()))?;
            let p = model.predict(&graph)?;
            emit(ctx.format, &json!({ "ln_count": p.ln_z }))
        }
    }
}

fn model_config(ctx: &Ctx, m: &ModelArgs) -> Result<ModelConfig, Failure> {
    let cfg = match &m.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)?
        }
        None => ModelConfig {
            variant: m.variant,
            t: m.t,
            damping_mode: m.damping,
            alpha: m.alpha,
            init: match m.init {
                InitKind::Random => Init::SeededRandom { seed: ctx.seed },
                InitKind::BpIdentity => Init::BpIdentity,
            },
            readout: Readout::Mlp3,
            ..ModelConfig::default()
        },
    };
    cfg.validate().map_err(|e| usage(e.into()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    history: String,
    epochs: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let cfg = model_config(ctx, &a.model)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr0: a.lr,
        halve_every: a.halve_every,
        batch_size: a.batch_size,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let samples = prepare(&load_records(&a.data)?)?;
    let outcome = train(Model::new(cfg)?, &samples, &tc)?;
    let ckpt = out_path(ctx, "ckpt.json");
    let history = history_path(&ckpt, a.history);
    outcome.model.save(&ckpt)?;
    save_history_csv(&outcome.history, &history)?;
    emit(
        ctx.format,
        &TrainSummary {
            checkpoint: ckpt.display().to_string(),
            history: history.display().to_string(),
            epochs: a.epochs,
            initial_loss: outcome.history[0].mean_loss,
            final_loss: outcome.final_loss(),
        },
    )
}

fn finetune_cmd(ctx: &Ctx, a: FinetuneArgs) -> CmdResult {
    let model = load_model(&a.ckpt)?;
    let samples = prepare(&load_records(&a.data)?)?;
    let ft = FineTuneConfig { epochs: a.epochs, lr: a.lr, n_examples: a.n_examples, ..FineTuneConfig::default() };
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(usage(anyhow!("--lr must be finite and non-negative")));
    }
    let outcome = fine_tune(model, &samples, &ft, ctx.seed)?;
    let ckpt = out_path(ctx, "finetuned.json");
    let history = history_path(&ckpt, a.history);
    outcome.model.save(&ckpt)?;
    save_history_csv(&outcome.history, &history)?;
    emit(
        ctx.format,
        &TrainSummary {
            checkpoint: ckpt.display().to_string(),
            history: history.display().to_string(),
            epochs: a.epochs,
            initial_loss: outcome.history[0].mean_loss,
            final_loss: outcome.final_loss(),
        },
    )
}

#[derive(Serialize)]
struct EvalSummary {
    predictor: String,
    n: usize,
    rmse: f64,
    mre: f64,
    n_excluded_from_mre: usize,
    wall_time_per_instance: f64,
    #[serde(rename = "RMSE/MRE")]
    cell: String,
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> CmdResult {
    let predictor = match a.method {
        EvalMethod::Exact => Predictor::Exact,
        EvalMethod::Bp => Predictor::Bp(BpOptions { max_iters: a.t, damping: a.alpha, ..BpOptions::default() }),
        EvalMethod::Model => {
            let path = a.ckpt.as_ref().ok_or_else(|| usage(anyhow!("--method model needs --ckpt")))?;
            Predictor::Model(Box::new(load_model(path)?))
        }
    };
    let records = load_records(&a.data)?;
    let report = evaluate(&predictor, &records)?;
    if let Some(path) = &ctx.out {
        fs::write(path, serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = EvalSummary {
        predictor: report.predictor.clone(),
        n: report.n,
        rmse: report.rmse,
        mre: report.mre,
        n_excluded_from_mre: report.n_excluded_from_mre,
        wall_time_per_instance: report.wall_time_per_instance,
        cell: report.cell(),
    };
    match ctx.format {
        Format::Text => {
            println!("RMSE/MRE {}", summary.cell);
            Ok(())
        }
        f => emit(f, &summary),
    }
}

fn ablate_cmd(ctx: &Ctx, a: AblateArgs) -> CmdResult {
    if a.emit_matrix {
        let path = out_path(ctx, "matrix.json");
        let matrix =
            ablation_matrix(&ModelConfig { init: Init::SeededRandom { seed: ctx.seed }, ..Default::default() });
        fs::write(&path, serde_json::to_string_pretty(&matrix).map_err(anyhow::Error::from)?)?;
        return Ok(());
    }
    let matrix: Vec<AblationEntry> = match &a.matrix {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)?
        }
        None => ablation_matrix(&ModelConfig { init: Init::SeededRandom { seed: ctx.seed }, ..Default::default() }),
    };
    if matrix.is_empty() {
        return Err(usage(anyhow!("ablation matrix is empty")));
    }
    for e in &matrix {
        e.config.validate().with_context(|| format!("config `{}`", e.config_id)).map_err(usage)?;
    }
    let data = prepare(&load_records(&a.data)?)?;
    let (train_set, test) = match &a.test {
        Some(p) => (data, prepare(&load_records(p)?)?),
        None => {
            if data.len() < 2 {
                return Err(usage(anyhow!("need at least two records to split off a test set")));
            }
            let cut = data.len() - (data.len() / 5).max(1);
            let mut data = data;
            let test = data.split_off(cut);
            (data, test)
        }
    };
    let tc =
        TrainConfig { epochs: a.epochs, lr0: a.lr, halve_every: a.halve_every, seed: ctx.seed, ..Default::default() };
    tc.validate()?;
    let dir = out_path(ctx, "ablation");
    let rows = run_ablation(&matrix, &train_set, &test, &tc, Some(&dir))?;
    output::emit_rows(ctx.format, &rows)
}
