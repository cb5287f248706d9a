//! Command-line interface: dataset generation, training, reranking,
//! evaluation, chain analysis, and knob sweeps.
//!
//! Every subcommand resolves its settings as flag over `--config` file over
//! built-in default, and the artifact-producing commands write the resolved
//! document back as `config.echo.json` so a run can be reproduced with
//! `--config <out>/config.echo.json`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (bad data, missing
//! file, inconsistent shapes), 2 on a usage error (unknown flag, missing
//! required argument).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::chain::{check_doubly_stochastic, check_ergodic, stationary_gap};
use crate::config::{
    EvaluateSection, InferSection, ModelSection, RunConfig, TrainSection, WorldSection,
};
use crate::data::{
    collect_vocabulary, load_sessions_csv, write_histories_csv, write_sessions_csv, Session,
    SyntheticWorld,
};
use crate::engine::{
    condition_likelihood, evaluate_arrangements, logged_order, pointwise_greedy_order,
    ArrangementEval, ConditionPolicy, InferenceConfig, Reranker, Trainer,
};
use crate::error::{Error, Result};
use crate::forward::{perm_kernel_matrix, token_kernel_matrix, OpKind};
use crate::metrics::paired_bootstrap;
use crate::model::Checkpoint;
use crate::perm::{ItemId, ItemSequence, SequenceSpec};

/// File names inside a dataset directory.
const TRAIN_SESSIONS: &str = "train_sessions.csv";
const TEST_SESSIONS: &str = "test_sessions.csv";
const HISTORIES: &str = "histories.csv";
const CONFIG_ECHO: &str = "config.echo.json";

#[derive(Parser)]
#[command(
    name = "rankdiff",
    version,
    about = "Conditional discrete-diffusion reranking of item lists"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic logged-feedback dataset as CSV files.
    GenData(GenDataArgs),
    /// Train the proposal and feedback models on logged sessions.
    Train(TrainArgs),
    /// Rerank logged sessions in bulk, or one ad-hoc list from JSON.
    Rerank(RerankArgs),
    /// Compare reranked output with the logged order and a pointwise-greedy
    /// baseline, with paired-bootstrap significance.
    Evaluate(EvaluateArgs),
    /// Report mixing behaviour of a forward corruption chain.
    AnalyzeChain(AnalyzeChainArgs),
    /// Re-evaluate while sweeping one inference knob.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of users.
    #[arg(long)]
    users: Option<usize>,
    /// Catalog size.
    #[arg(long)]
    items: Option<usize>,
    /// Number of sessions (the last 20% become the test split).
    #[arg(long)]
    sessions: Option<usize>,
    /// Latent topic count.
    #[arg(long)]
    topics: Option<usize>,
    /// Comma-separated per-slot position-bias curve; its length sets the
    /// list length.
    #[arg(long, value_delimiter = ',')]
    position_bias: Option<Vec<f64>>,
    /// Redundancy penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Feedback noise scale.
    #[arg(long)]
    noise: Option<f64>,
    /// Pre-ranker noise scale (how wrong the logged order is).
    #[arg(long)]
    preranker_noise: Option<f64>,
    /// Bootstrap history length per user.
    #[arg(long)]
    history_len: Option<usize>,
    /// World seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding train_sessions.csv and histories.csv
    /// (and, for per-epoch evaluation, test_sessions.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics.csv, config.echo.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Item-embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Evaluator MLP hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Candidate-score softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Passes over the training sessions.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sessions per optimizer update.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Corruption process to train against.
    #[arg(long, value_enum)]
    op: Option<OpArg>,
    /// Per-step corruption probability.
    #[arg(long)]
    beta: Option<f64>,
    /// Forward horizon.
    #[arg(long)]
    t_max: Option<usize>,
    /// Update rule.
    #[arg(long, value_enum)]
    optimizer: Option<OptimArg>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Proposal-model learning rate, when it should differ from --lr.
    #[arg(long)]
    lr_denoiser: Option<f64>,
    /// Seed for init, corruption draws, and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the per-epoch test-set evaluation even when test data exists.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum OpArg {
    /// Whole-arrangement chain.
    Perm,
    /// Per-slot token chain.
    Token,
}

impl From<OpArg> for OpKind {
    fn from(v: OpArg) -> OpKind {
        match v {
            OpArg::Perm => OpKind::Perm,
            OpArg::Token => OpKind::Token,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum OptimArg {
    Adam,
    Sgd,
}

impl From<OptimArg> for crate::model::optim::OptimizerKind {
    fn from(v: OptimArg) -> Self {
        match v {
            OptimArg::Adam => Self::Adam,
            OptimArg::Sgd => Self::Sgd,
        }
    }
}

/// Inference flags shared by rerank, evaluate, and sweep.
#[derive(Args)]
struct InferFlags {
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum reverse steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Early-stop improvement threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Token-level per-slot shortlist width.
    #[arg(long)]
    top_m: Option<usize>,
}

impl InferFlags {
    fn section(&self) -> InferSection {
        InferSection {
            beam: self.beam,
            max_steps: self.steps,
            early_stop: self.epsilon,
            top_m: self.top_m,
        }
    }
}

#[derive(Args)]
struct RerankArgs {
    /// Trained model snapshot.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (bulk mode); reranks its test sessions.
    #[arg(long, required_unless_present = "session", conflicts_with = "session")]
    data: Option<PathBuf>,
    /// Output CSV (bulk mode): session_id,position,item_id.
    #[arg(long, requires = "data")]
    out: Option<PathBuf>,
    /// Optional JSON-lines file with per-session diagnostics (bulk mode).
    #[arg(long, requires = "data")]
    diagnostics: Option<PathBuf>,
    /// Rerank the split usually held out for testing, or the training one.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// One ad-hoc request as JSON: {"items": [..], "history": [..],
    /// "condition": [..]} (debug mode); the outcome prints to stdout.
    #[arg(long)]
    session: Option<PathBuf>,
    #[command(flatten)]
    infer: InferFlags,
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained model snapshot.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; evaluation runs on its test sessions.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    infer: InferFlags,
    /// Bootstrap resamples.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Bootstrap seed.
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    /// NDCG cutoff.
    #[arg(long)]
    ndcg_k: Option<usize>,
}

#[derive(Args)]
struct AnalyzeChainArgs {
    /// Arranged list length (whole-arrangement chain) or candidate count
    /// (token chain).
    #[arg(long)]
    list_len: usize,
    /// Which chain to analyze.
    #[arg(long, value_enum, default_value = "perm")]
    op: OpArg,
    /// Per-step corruption probability.
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    /// Steps to trace.
    #[arg(long, default_value_t = 50)]
    t_max: usize,
    /// Report the first step whose distance to uniform drops below this.
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Write the per-step curve as CSV (t,tv_distance) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Trained model snapshot.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; the sweep runs on its test sessions.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which inference knob to sweep.
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values to try.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Write the CSV (value,auc,ndcg) here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    infer: InferFlags,
    /// NDCG cutoff.
    #[arg(long)]
    ndcg_k: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SweepParam {
    /// Maximum reverse steps.
    Steps,
    /// Beam width.
    Beam,
}

/// Parses the process arguments, runs the selected command, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Rerank(a) => rerank(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::AnalyzeChain(a) => analyze_chain(a),
        Cmd::Sweep(a) => sweep(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let flags = WorldSection {
        n_users: a.users,
        n_items: a.items,
        n_sessions: a.sessions,
        n_topics: a.topics,
        position_bias: a.position_bias.clone(),
        lambda: a.lambda,
        noise: a.noise,
        preranker_noise: a.preranker_noise,
        history_len: a.history_len,
        seed: a.seed,
    };
    let world_cfg = cfg.world.overlay(&flags).materialize();
    let world = SyntheticWorld::build(&world_cfg)?;
    let ds = world.generate();

    std::fs::create_dir_all(&a.out)?;
    write_sessions_csv(&ds.train, &a.out.join(TRAIN_SESSIONS))?;
    write_sessions_csv(&ds.test, &a.out.join(TEST_SESSIONS))?;
    let all: Vec<Session> = ds.all().cloned().collect();
    write_histories_csv(&all, &a.out.join(HISTORIES))?;
    cfg.world = WorldSection::pinned(&world_cfg);
    cfg.save(&a.out.join(CONFIG_ECHO))?;
    println!(
        "wrote {} train and {} test sessions ({} slots each) to {}",
        ds.train.len(),
        ds.test.len(),
        world_cfg.list_len(),
        a.out.display()
    );
    Ok(())
}

fn dataset_spec(sessions: &[Session]) -> Result<SequenceSpec> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset holds no sessions".into()))?;
    SequenceSpec::new(first.displayed.base().len(), first.displayed.len())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let model_flags = ModelSection {
        dim: a.dim,
        hidden: a.hidden,
        tau: a.tau,
    };
    let train_flags = TrainSection {
        epochs: a.epochs,
        batch_size: a.batch_size,
        op: a.op.map(Into::into),
        beta: a.beta,
        t_max: a.t_max,
        optimizer: a.optimizer.map(Into::into),
        lr: a.lr,
        lr_denoiser: a.lr_denoiser,
        seed: a.seed,
    };
    let hyper = cfg.model.overlay(&model_flags).materialize();
    let train_cfg = cfg.train.overlay(&train_flags).materialize();
    let infer_cfg = cfg.infer.materialize();

    let train_sessions =
        load_sessions_csv(&a.data.join(TRAIN_SESSIONS), &a.data.join(HISTORIES))?;
    let test_path = a.data.join(TEST_SESSIONS);
    let test_sessions = if test_path.exists() && !a.no_eval {
        Some(load_sessions_csv(&test_path, &a.data.join(HISTORIES))?)
    } else {
        None
    };

    let spec = dataset_spec(&train_sessions)?;
    let vocab = collect_vocabulary(&train_sessions);
    let mut trainer = Trainer::new(&vocab, hyper, spec, train_cfg.clone())?;

    std::fs::create_dir_all(&a.out)?;
    cfg.model = ModelSection::pinned(hyper);
    cfg.train = TrainSection::pinned(&train_cfg);
    cfg.infer = InferSection::pinned(&infer_cfg);
    cfg.save(&a.out.join(CONFIG_ECHO))?;

    let mut metrics = csv::Writer::from_path(a.out.join("metrics.csv")).map_err(csv_io)?;
    metrics
        .write_record(["epoch", "denoiser_loss", "evaluator_loss", "auc", "ndcg"])
        .map_err(csv_io)?;

    for epoch in 1..=train_cfg.epochs {
        let stats = trainer.train_epoch(&train_sessions)?;
        let (auc_cell, ndcg_cell) = match &test_sessions {
            Some(test) => {
                let rr = Reranker::new(
                    trainer.denoiser().clone(),
                    trainer.evaluator().clone(),
                    train_cfg.op,
                );
                let eval = rerank_and_score(&rr, test, &infer_cfg, 3)?.1;
                (
                    eval.auc.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    format!("{:.6}", eval.mean_ndcg),
                )
            }
            None => (String::new(), String::new()),
        };
        metrics
            .write_record([
                epoch.to_string(),
                format!("{:.6}", stats.mean_denoiser_loss),
                format!("{:.6}", stats.mean_evaluator_loss),
                auc_cell.clone(),
                ndcg_cell.clone(),
            ])
            .map_err(csv_io)?;
        metrics.flush()?;

        let ck = trainer.checkpoint()?;
        ck.save(&a.out.join(format!("checkpoint-epoch-{epoch:03}.json")))?;
        let mut line = format!(
            "epoch {epoch:3}: denoiser {:.4}, evaluator {:.4}",
            stats.mean_denoiser_loss, stats.mean_evaluator_loss
        );
        if !ndcg_cell.is_empty() {
            write!(line, ", test ndcg@3 {ndcg_cell}").expect("string write");
        }
        if stats.sessions_skipped > 0 {
            write!(line, " ({} sessions skipped)", stats.sessions_skipped).expect("string write");
        }
        println!("{line}");
    }
    trainer.checkpoint()?.save(&a.out.join("checkpoint.json"))?;
    println!("final checkpoint: {}", a.out.join("checkpoint.json").display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn split_file(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => TRAIN_SESSIONS,
        SplitArg::Test => TEST_SESSIONS,
    }
}

/// Reranks every session and scores the outputs against logged feedback.
fn rerank_and_score(
    rr: &Reranker,
    sessions: &[Session],
    cfg: &InferenceConfig,
    ndcg_k: usize,
) -> Result<(Vec<ItemSequence>, ArrangementEval)> {
    let mut outputs = Vec::with_capacity(sessions.len());
    for s in sessions {
        outputs.push(rr.rerank(&s.displayed, &s.history, cfg)?.output);
    }
    let refs: Vec<&Session> = sessions.iter().collect();
    let eval = evaluate_arrangements(&refs, &outputs, ndcg_k)?;
    Ok((outputs, eval))
}

/// Ad-hoc rerank request (debug mode input).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdhocRequest {
    /// Items in their current order.
    items: Vec<u64>,
    /// The viewing user's past items, most recent first.
    #[serde(default)]
    history: Vec<u64>,
    /// Wanted feedback per slot; defaults to all-positive.
    #[serde(default)]
    condition: Option<Vec<bool>>,
}

/// Ad-hoc rerank response (debug mode output).
#[derive(Serialize)]
struct AdhocResponse {
    items: Vec<u64>,
    condition_likelihood: f64,
    diagnostics: crate::engine::RerankDiagnostics,
}

fn rerank(a: RerankArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let infer_cfg = cfg.infer.overlay(&a.infer.section()).materialize();
    let ck = load_checkpoint(&a.checkpoint)?;
    let rr = Reranker::from_checkpoint(&ck)?;

    if let Some(request_path) = &a.session {
        let body = std::fs::read_to_string(request_path)?;
        let req: AdhocRequest = serde_json::from_str(&body).map_err(|e| {
            Error::InvalidArgument(format!("request {}: {e}", request_path.display()))
        })?;
        let base: Arc<[ItemId]> = req.items.iter().map(|&i| ItemId(i)).collect();
        let n = base.len();
        let seq = ItemSequence::new(base, (0..n).collect())?;
        let history: Vec<ItemId> = req.history.iter().map(|&i| ItemId(i)).collect();
        let mut one = infer_cfg.clone();
        if let Some(mask) = req.condition {
            one.condition = ConditionPolicy::Mask(mask);
        }
        let outcome = rr.rerank(&seq, &history, &one)?;
        let condition = one.condition.expand(seq.len())?;
        let response = AdhocResponse {
            items: outcome.output.items().iter().map(|i| i.0).collect(),
            condition_likelihood: condition_likelihood(
                &rr.evaluator,
                &outcome.output.items(),
                &condition,
                &history,
            )?,
            diagnostics: outcome.diagnostics,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&response)
                .map_err(|e| Error::InvalidArgument(format!("serialize response: {e}")))?
        );
        return Ok(());
    }

    let data = a.data.as_ref().expect("clap enforces data in bulk mode");
    let sessions = load_sessions_csv(&data.join(split_file(a.split)), &data.join(HISTORIES))?;
    let out_path = a
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("bulk mode needs --out".into()))?;
    let mut w = csv::Writer::from_path(&out_path).map_err(csv_io)?;
    w.write_record(["session_id", "position", "item_id"])
        .map_err(csv_io)?;
    let mut diag_file = match &a.diagnostics {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    for s in &sessions {
        let outcome = rr.rerank(&s.displayed, &s.history, &infer_cfg)?;
        for (k, item) in outcome.output.items().iter().enumerate() {
            w.write_record([s.session_id.to_string(), k.to_string(), item.0.to_string()])
                .map_err(csv_io)?;
        }
        if let Some(f) = &mut diag_file {
            use std::io::Write;
            let line = serde_json::json!({
                "session_id": s.session_id,
                "diagnostics": outcome.diagnostics,
            });
            writeln!(f, "{line}")?;
        }
    }
    w.flush()?;
    println!("reranked {} sessions into {}", sessions.len(), out_path.display());
    Ok(())
}

/// One system's aggregate scores in the comparison report.
#[derive(Serialize, Deserialize)]
struct SystemReport {
    name: String,
    auc: Option<f64>,
    mean_ndcg: f64,
}

/// Paired significance of one system over another.
#[derive(Serialize, Deserialize)]
struct ComparisonReport {
    better: String,
    over: String,
    mean_ndcg_diff: f64,
    p_value: f64,
}

/// The full evaluate-command output.
#[derive(Serialize, Deserialize)]
struct EvaluationReport {
    sessions: usize,
    ndcg_k: usize,
    bootstrap_samples: usize,
    systems: Vec<SystemReport>,
    comparisons: Vec<ComparisonReport>,
}

fn evaluate_sessions(
    rr: &Reranker,
    sessions: &[Session],
    infer_cfg: &InferenceConfig,
    samples: usize,
    seed: u64,
    ndcg_k: usize,
) -> Result<EvaluationReport> {
    let refs: Vec<&Session> = sessions.iter().collect();
    let (_, reranked) = rerank_and_score(rr, sessions, infer_cfg, ndcg_k)?;
    let logged: Vec<ItemSequence> = sessions.iter().map(logged_order).collect();
    let logged = evaluate_arrangements(&refs, &logged, ndcg_k)?;
    let mut greedy_outputs = Vec::with_capacity(sessions.len());
    for s in sessions {
        greedy_outputs.push(pointwise_greedy_order(&rr.evaluator, s)?);
    }
    let greedy = evaluate_arrangements(&refs, &greedy_outputs, ndcg_k)?;

    let mut comparisons = Vec::new();
    for (name, base) in [("logged", &logged), ("pointwise-greedy", &greedy)] {
        let bs = paired_bootstrap(
            &reranked.ndcg_per_session,
            &base.ndcg_per_session,
            samples,
            seed,
        )?;
        comparisons.push(ComparisonReport {
            better: "reranked".into(),
            over: name.into(),
            mean_ndcg_diff: bs.mean_diff,
            p_value: bs.p_value,
        });
    }
    Ok(EvaluationReport {
        sessions: sessions.len(),
        ndcg_k,
        bootstrap_samples: samples,
        systems: vec![
            SystemReport {
                name: "reranked".into(),
                auc: reranked.auc,
                mean_ndcg: reranked.mean_ndcg,
            },
            SystemReport {
                name: "logged".into(),
                auc: logged.auc,
                mean_ndcg: logged.mean_ndcg,
            },
            SystemReport {
                name: "pointwise-greedy".into(),
                auc: greedy.auc,
                mean_ndcg: greedy.mean_ndcg,
            },
        ],
        comparisons,
    })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let infer_cfg = cfg.infer.overlay(&a.infer.section()).materialize();
    let eval_flags = EvaluateSection {
        bootstrap_samples: a.bootstrap,
        bootstrap_seed: a.bootstrap_seed,
        ndcg_k: a.ndcg_k,
    };
    let (samples, seed, ndcg_k) = cfg.evaluate.overlay(&eval_flags).materialize();

    let ck = load_checkpoint(&a.checkpoint)?;
    let rr = Reranker::from_checkpoint(&ck)?;
    let sessions = load_sessions_csv(&a.data.join(TEST_SESSIONS), &a.data.join(HISTORIES))?;
    let report = evaluate_sessions(&rr, &sessions, &infer_cfg, samples, seed, ndcg_k)?;
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidArgument(format!("serialize report: {e}")))?;
    if let Some(out) = &a.out {
        std::fs::write(out, body.clone() + "\n")?;
    }
    println!("{body}");
    Ok(())
}

fn analyze_chain(a: AnalyzeChainArgs) -> Result<()> {
    let m = match a.op {
        OpArg::Perm => perm_kernel_matrix(a.list_len, a.beta)?,
        OpArg::Token => token_kernel_matrix(a.list_len, a.beta)?,
    };
    let ds = check_doubly_stochastic(&m, 1e-9)?;
    let erg = check_ergodic(&m)?;
    let report = stationary_gap(&m, a.t_max, Some(a.threshold))?;

    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out).map_err(csv_io)?;
        w.write_record(["t", "tv_distance"]).map_err(csv_io)?;
        for (t, tv) in report.tv_curve.iter().enumerate() {
            w.write_record([t.to_string(), format!("{tv:.12e}")])
                .map_err(csv_io)?;
        }
        w.flush()?;
    }
    let summary = serde_json::json!({
        "n_states": report.n_states,
        "doubly_stochastic_deviation": ds.max_row_dev.max(ds.max_col_dev),
        "ergodic": erg.is_ergodic(),
        "threshold": a.threshold,
        "t_star": report.t_star,
        "final_tv": report.tv_curve.last(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::InvalidArgument(format!("serialize summary: {e}")))?
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let base = cfg.infer.overlay(&a.infer.section()).materialize();
    let ndcg_k = a
        .ndcg_k
        .or(cfg.evaluate.ndcg_k)
        .unwrap_or(crate::config::DEFAULT_NDCG_K);
    let ck = load_checkpoint(&a.checkpoint)?;
    let rr = Reranker::from_checkpoint(&ck)?;
    let sessions = load_sessions_csv(&a.data.join(TEST_SESSIONS), &a.data.join(HISTORIES))?;

    let mut rows = vec!["value,auc,ndcg".to_string()];
    for &v in &a.values {
        let mut one = base.clone();
        match a.param {
            SweepParam::Steps => one.max_steps = v,
            SweepParam::Beam => one.beam = v,
        }
        let (_, eval) = rerank_and_score(&rr, &sessions, &one, ndcg_k)?;
        rows.push(format!(
            "{v},{},{:.6}",
            eval.auc.map(|x| format!("{x:.6}")).unwrap_or_default(),
            eval.mean_ndcg
        ));
    }
    let body = rows.join("\n") + "\n";
    if let Some(out) = &a.out {
        std::fs::write(out, &body)?;
    }
    print!("{body}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_code_2() {
        use clap::CommandFactory;
        let err = Cli::command()
            .try_get_matches_from(["rankdiff", "no-such-command"])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = Cli::command()
            .try_get_matches_from(["rankdiff", "gen-data"]) // missing --out
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn rerank_modes_are_mutually_exclusive() {
        use clap::CommandFactory;
        let err = Cli::command().try_get_matches_from([
            "rankdiff",
            "rerank",
            "--checkpoint",
            "ck.json",
            "--data",
            "d",
            "--session",
            "s.json",
        ]);
        assert!(err.is_err(), "--data and --session must conflict");
        let err = Cli::command().try_get_matches_from([
            "rankdiff",
            "rerank",
            "--checkpoint",
            "ck.json",
        ]);
        assert!(err.is_err(), "one of --data/--session is required");
    }
}
