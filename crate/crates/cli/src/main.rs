use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use r2d2::annotate::Annotator;
use r2d2::corpus::{golden_set, load_examples, PassageId, PassageStore, QaExample};
use r2d2::eval::{
    ablation_run, accuracy_at_k, em_report, index_size_sweep, AblationTable, EvalReport, IndexSide, SweepPoint,
};
use r2d2::fusion::{FeatureMask, ModelFile, TrainConfig};
use r2d2::index::{EmbeddingMatrix, RetrievalResult};
use r2d2::io::{read_jsonl, write_jsonl};
use r2d2::pipeline::{
    train_fusion, FileProvider, FusionMode, LexicalProvider, Pipeline, PipelineConfig, ScoreProvider, StageCache,
};
use r2d2::pruner::{inject_golden, pool_top_n, select_by_threshold, PrunedSet, RelevanceScores};

#[derive(Parser)]
#[command(name = "r2d2", version, about = "Retrieve, rerank and read over precomputed scores")]
struct Cli {
    /// TOML file with a `[pipeline]` table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select passages by relevance score and write the pruned set.
    Prune(PruneArgs),
    /// Build or query an fp16 passage index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Write the top-K retrieved passages per question.
    Retrieve(StageArgs),
    /// Write the reranked candidate order per question.
    Rerank(StageArgs),
    /// Write distant-supervision annotations over the reader passages.
    Annotate(StageArgs),
    /// Run every stage up to fusion and cache the outputs.
    Decode(StageArgs),
    /// Train or apply the fusion models.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Score predictions or retrieval output.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Ablation table over reranker on/off and fusion modes, pruned vs full index.
    Ablate(AblateArgs),
    /// EM as a function of index size.
    Sweep(SweepArgs),
    /// Answer every question and report EM.
    E2e(E2eArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build the lexical embedding index of a passage file.
    Build {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k rows for a query vector.
    Search {
        #[arg(long)]
        index: PathBuf,
        /// JSON array of floats.
        #[arg(long, conflicts_with = "query_file")]
        query: Option<String>,
        /// Raw little-endian fp32 row.
        #[arg(long)]
        query_file: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args)]
struct PruneArgs {
    /// JSON-lines `{"id", "p"}`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, conflicts_with = "top_n")]
    tau: Option<f64>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Examples whose golden passages are always kept.
    #[arg(long)]
    golden_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the index restricted to the pruned set.
    #[arg(long, requires = "index_out")]
    index: Option<PathBuf>,
    #[arg(long)]
    index_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Lexical,
    Files,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    passages: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long, value_enum, default_value = "lexical")]
    provider: ProviderKind,
    /// Score directory for the `files` provider.
    #[arg(long)]
    scores_dir: Option<PathBuf>,
    /// Index file; the lexical provider builds one when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
}

#[derive(Subcommand)]
enum FuseCommand {
    /// Fit the score-aggregation model.
    TrainAggr {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Features among e,g,r,rr.
        #[arg(long, default_value = "e,g,r,rr")]
        mask: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the extractive/abstractive decision model.
    TrainBd {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        aggr: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse cached stage outputs into answers.
    Apply {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        aggr: Option<PathBuf>,
        #[arg(long)]
        bd: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Exact match of a predictions file.
    Em {
        #[arg(long)]
        examples: PathBuf,
        /// JSON-lines `{"question_key", "answer"}`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Accuracy@K of a retrieval file.
    Acc {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        /// Output of `retrieve`.
        #[arg(long)]
        retrieved: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 20])]
        k: Vec<usize>,
    },
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pruned set defining the left index.
    #[arg(long)]
    pruned: PathBuf,
    /// Fusion models are fitted on these examples; defaults to `--examples`.
    #[arg(long)]
    train_examples: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Relevance scores ranking the non-golden passages.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long)]
    aggr: Option<PathBuf>,
    #[arg(long)]
    bd: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct E2eArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    aggr: Option<PathBuf>,
    #[arg(long)]
    bd: Option<PathBuf>,
    /// Predictions as JSON-lines `{"question_key", "answer"}`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-question stage traces.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    question_key: String,
    answer: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Retrieved {
    question_key: String,
    passages: Vec<RetrievalResult>,
}

#[derive(Serialize)]
struct Reranked {
    question_key: String,
    order: Vec<PassageId>,
}

struct Loaded {
    store: Arc<PassageStore>,
    examples: Vec<QaExample>,
    index: Arc<EmbeddingMatrix>,
    provider: Arc<dyn ScoreProvider>,
}

fn load_data(d: &DataArgs) -> Result<Loaded> {
    let store = Arc::new(
        PassageStore::load(&d.passages).with_context(|| format!("loading passages {}", d.passages.display()))?,
    );
    let examples = load_examples(&d.examples, Some(&store))
        .with_context(|| format!("loading examples {}", d.examples.display()))?;
    let (provider, built): (Arc<dyn ScoreProvider>, Option<EmbeddingMatrix>) = match d.provider {
        ProviderKind::Lexical => {
            let lex = LexicalProvider::new(store.clone())?;
            let built = if d.index.is_none() { Some(lex.build_index()?) } else { None };
            (Arc::new(lex), built)
        }
        ProviderKind::Files => {
            let dir = d.scores_dir.as_ref().context("--scores-dir is required with --provider files")?;
            (Arc::new(FileProvider::open(dir)?), None)
        }
    };
    let index = match (&d.index, built) {
        (Some(path), _) => EmbeddingMatrix::read(path).with_context(|| format!("reading index {}", path.display()))?,
        (None, Some(idx)) => idx,
        (None, None) => bail!("--index is required with --provider files"),
    };
    Ok(Loaded {
        store,
        examples,
        index: Arc::new(index),
        provider,
    })
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn pipeline(l: &Loaded, cfg: PipelineConfig) -> Result<Pipeline> {
    Ok(Pipeline::new(cfg, l.store.clone(), l.index.clone(), l.provider.clone())?)
}

fn with_models(mut p: Pipeline, aggr: Option<&Path>, bd: Option<&Path>) -> Result<Pipeline> {
    if let Some(a) = aggr {
        p = p.with_aggregation(ModelFile::load(a)?.aggregation()?);
    }
    if let Some(b) = bd {
        p = p.with_decision(ModelFile::load(b)?.decision()?);
    }
    Ok(p)
}

fn collect(p: &Pipeline, examples: &[QaExample], cache: Option<&PathBuf>) -> Result<Vec<r2d2::Result<r2d2::pipeline::QuestionCandidates>>> {
    Ok(match cache {
        Some(dir) => p.collect_batch_cached(examples, &StageCache::new(dir)?)?,
        None => p.collect_batch(examples),
    })
}

fn train_config(cli: &Cli, t: &TrainArgs) -> TrainConfig {
    TrainConfig {
        seed: cli.seed,
        epochs: t.epochs,
        lr: t.lr,
        halve_on_increase: true,
    }
}

fn write_predictions(path: &Path, examples: &[QaExample], answers: &[Option<String>]) -> Result<()> {
    let rows: Vec<Prediction> = examples
        .iter()
        .zip(answers)
        .map(|(e, a)| Prediction {
            question_key: e.key().to_string(),
            answer: a.clone(),
        })
        .collect();
    Ok(write_jsonl(path, &rows)?)
}

fn print_report(r: &r2d2::pipeline::BatchReport) {
    println!("{} = {:.4} over {} questions", r.report.metric, r.report.value, r.report.per_example.len());
    for (i, e) in &r.errors {
        eprintln!("question {i}: {e}");
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Prune(a) => prune(a),
        Command::Index(c) => index(c),
        Command::Retrieve(a) => retrieve(&cli, a),
        Command::Rerank(a) => rerank(&cli, a),
        Command::Annotate(a) => annotate(&cli, a),
        Command::Decode(a) => decode(&cli, a),
        Command::Fuse(c) => fuse(&cli, c),
        Command::Eval(c) => eval(c),
        Command::Ablate(a) => ablate(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
        Command::E2e(a) => e2e(&cli, a),
    }
}

fn prune(a: &PruneArgs) -> Result<()> {
    let scores = RelevanceScores::load(&a.scores)?;
    let mut set = match (a.tau, a.top_n) {
        (Some(t), None) => select_by_threshold(&scores, t)?,
        (None, Some(n)) => pool_top_n(&scores, n)?,
        _ => bail!("give exactly one of --tau and --top-n"),
    };
    if let Some(path) = &a.golden_from {
        set = inject_golden(&set, &golden_set(&load_examples(path, None)?));
    }
    set.save(&a.out)?;
    println!("kept {} of {} passages, tau = {}", set.len(), scores.len(), set.tau);
    if let (Some(src), Some(dst)) = (&a.index, &a.index_out) {
        EmbeddingMatrix::read(src)?.subset(&set.as_hash_set())?.write(dst)?;
    }
    Ok(())
}

fn index(c: &IndexCommand) -> Result<()> {
    match c {
        IndexCommand::Build { passages, out } => {
            let lex = LexicalProvider::new(Arc::new(PassageStore::load(passages)?))?;
            let idx = lex.build_index()?;
            idx.write(out)?;
            println!("{} rows x {} dims", idx.len(), idx.dim());
        }
        IndexCommand::Search {
            index,
            query,
            query_file,
            k,
        } => {
            let idx = EmbeddingMatrix::read(index)?;
            let q: Vec<f32> = match (query, query_file) {
                (Some(json), None) => serde_json::from_str(json)?,
                (None, Some(path)) => {
                    let bytes = std::fs::read(path)?;
                    if bytes.len() % 4 != 0 {
                        bail!("query file length is not a multiple of 4");
                    }
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect()
                }
                _ => bail!("give exactly one of --query and --query-file"),
            };
            for r in idx.search(&q, *k)? {
                println!("{}\t{}", r.passage_id, r.score);
            }
        }
    }
    Ok(())
}

fn retrieve(cli: &Cli, a: &StageArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let cfg = load_config(cli)?;
    let rows = l
        .examples
        .iter()
        .map(|q| {
            let v = l.provider.query_embedding(q)?;
            Ok(Retrieved {
                question_key: q.key().to_string(),
                passages: l.index.search(&v, cfg.k)?,
            })
        })
        .collect::<r2d2::Result<Vec<_>>>()?;
    let out = a.out.as_ref().context("--out is required")?;
    write_jsonl(out, &rows)?;
    println!("retrieved {} passages for {} questions", cfg.k, rows.len());
    Ok(())
}

fn rerank(cli: &Cli, a: &StageArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let cfg = PipelineConfig {
        reranker: true,
        ..load_config(cli)?
    };
    let p = pipeline(&l, cfg)?;
    let cands = collect(&p, &l.examples, a.cache.as_ref())?;
    let mut rows = Vec::new();
    for (q, c) in l.examples.iter().zip(cands) {
        rows.push(Reranked {
            question_key: q.key().to_string(),
            order: c?.reranked.unwrap_or_default(),
        });
    }
    write_jsonl(a.out.as_ref().context("--out is required")?, &rows)?;
    println!("reranked {} questions", rows.len());
    Ok(())
}

fn annotate(cli: &Cli, a: &StageArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let p = pipeline(&l, load_config(cli)?)?;
    let annotator = Annotator::default();
    let cands = collect(&p, &l.examples, a.cache.as_ref())?;
    let mut rows = Vec::new();
    for (q, c) in l.examples.iter().zip(cands) {
        rows.push(annotator.annotate_example(q, &c?.reader_passages, &l.store)?);
    }
    write_jsonl(a.out.as_ref().context("--out is required")?, &rows)?;
    let spans: usize = rows.iter().map(|r| r.spans.len()).sum();
    println!("{spans} spans over {} questions", rows.len());
    Ok(())
}

fn decode(cli: &Cli, a: &StageArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let p = pipeline(&l, load_config(cli)?)?;
    let cands = collect(&p, &l.examples, a.cache.as_ref())?;
    let mut ok = Vec::new();
    for (q, c) in l.examples.iter().zip(cands) {
        match c {
            Ok(c) => ok.push(c),
            Err(e) => eprintln!("{:?}: {e}", q.key()),
        }
    }
    if let Some(out) = &a.out {
        write_jsonl(out, &ok)?;
    }
    println!("decoded {} of {} questions", ok.len(), l.examples.len());
    Ok(())
}

fn fuse(cli: &Cli, c: &FuseCommand) -> Result<()> {
    match c {
        FuseCommand::TrainAggr {
            data,
            cache,
            mask,
            train,
            out,
        } => {
            let l = load_data(data)?;
            let p = pipeline(&l, load_config(cli)?)?;
            let cands = collect(&p, &l.examples, cache.as_ref())?;
            let mask: FeatureMask = mask.parse()?;
            let models = train_fusion(&l.examples, &cands, mask, &train_config(cli, train))?;
            ModelFile::from_aggregation(&models.aggregation, Some(models.aggregation_report.clone())).save(out)?;
            println!(
                "aggregation loss {:.6} -> {:.6}",
                models.aggregation_report.initial_loss, models.aggregation_report.final_loss
            );
        }
        FuseCommand::TrainBd {
            data,
            cache,
            aggr,
            train,
            out,
        } => {
            let l = load_data(data)?;
            let p = pipeline(&l, load_config(cli)?)?;
            let cands = collect(&p, &l.examples, cache.as_ref())?;
            let model = ModelFile::load(aggr)?.aggregation()?;
            let mut rows = Vec::new();
            for (q, c) in l.examples.iter().zip(&cands) {
                if let Ok(c) = c {
                    if let Some(r) = r2d2::pipeline::decision_example(c, q, &model)? {
                        rows.push(r);
                    }
                }
            }
            let (dm, report) = r2d2::fusion::train_binary_decision(&rows, &train_config(cli, train))?;
            ModelFile::from_decision(&dm, Some(report.clone())).save(out)?;
            println!("decision loss {:.6} -> {:.6} on {} rows", report.initial_loss, report.final_loss, rows.len());
        }
        FuseCommand::Apply {
            data,
            cache,
            mode,
            aggr,
            bd,
            out,
        } => {
            let l = load_data(data)?;
            let mut cfg = load_config(cli)?;
            if let Some(m) = mode {
                cfg.fusion = m.parse()?;
            }
            let p = with_models(pipeline(&l, cfg)?, aggr.as_deref(), bd.as_deref())?;
            let cands = collect(&p, &l.examples, cache.as_ref())?;
            let r = p.fuse_batch(&l.examples, &cands)?;
            if let Some(out) = out {
                write_predictions(out, &l.examples, &r.predictions)?;
            }
            print_report(&r);
        }
    }
    Ok(())
}

fn eval(c: &EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Em {
            examples,
            predictions,
            report,
        } => {
            let examples = load_examples(examples, None)?;
            let preds: Vec<Prediction> = read_jsonl(predictions)?;
            let by_key: std::collections::HashMap<String, Option<String>> =
                preds.into_iter().map(|p| (p.question_key, p.answer)).collect();
            let answers: Vec<String> = examples
                .iter()
                .map(|e| by_key.get(e.key()).cloned().flatten().unwrap_or_default())
                .collect();
            let r = em_report(&answers, &examples, "")?;
            println!("em = {:.4} over {} questions", r.value, r.per_example.len());
            if let Some(path) = report {
                r.save(path)?;
            }
        }
        EvalCommand::Acc {
            examples,
            passages,
            retrieved,
            k,
        } => {
            let store = PassageStore::load(passages)?;
            let examples = load_examples(examples, Some(&store))?;
            let rows: Vec<Retrieved> = read_jsonl(retrieved)?;
            let by_key: std::collections::HashMap<String, Vec<PassageId>> = rows
                .into_iter()
                .map(|r| (r.question_key, r.passages.into_iter().map(|p| p.passage_id).collect()))
                .collect();
            let lists = examples
                .iter()
                .map(|e| by_key.get(e.key()).cloned().with_context(|| format!("no retrieval for {:?}", e.key())))
                .collect::<Result<Vec<_>>>()?;
            let annotator = Annotator::default();
            for k in k {
                let r: EvalReport = accuracy_at_k(&lists, &examples, &store, *k, &annotator)?;
                println!("{} = {:.4}", r.metric, r.value);
            }
        }
    }
    Ok(())
}

/// Fits fusion models for one pipeline variant; `None` when there is
/// nothing to train on.
fn fitted(p: &Pipeline, train: &[QaExample], cfg: &TrainConfig) -> Option<Pipeline> {
    let mask = if p.config().reranker {
        FeatureMask::FULL
    } else {
        "e,g,r".parse().ok()?
    };
    let cands = p.collect_batch(train);
    let models = train_fusion(train, &cands, mask, cfg).ok()?;
    let mut out = p.clone().with_aggregation(models.aggregation);
    if let Some((dm, _)) = models.decision {
        out = out.with_decision(dm);
    }
    Some(out)
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let base = load_config(cli)?;
    let train = match &a.train_examples {
        Some(p) => load_examples(p, Some(&l.store))?,
        None => l.examples.clone(),
    };
    let pruned = PrunedSet::load(&a.pruned)?;
    let left_index = Arc::new(l.index.subset(&pruned.as_hash_set())?);
    let full = pipeline(&l, base.clone())?;
    let tcfg = train_config(cli, &a.train);
    let table: AblationTable = ablation_run("pruned", "full", |reranker, mode, side| {
        let cfg = PipelineConfig {
            reranker,
            fusion: mode,
            ..base.clone()
        };
        let mut p = full.with_config(cfg)?;
        if side == IndexSide::Left {
            p = p.with_index(left_index.clone());
        }
        if matches!(mode, FusionMode::Aggregate | FusionMode::AggregateDecision) {
            p = fitted(&p, &train, &tcfg).ok_or_else(|| r2d2::Error::Empty("fusion training data".into()))?;
        }
        Ok(p.run_batch(&l.examples)?.report.value)
    });
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let p = with_models(pipeline(&l, load_config(cli)?)?, a.aggr.as_deref(), a.bd.as_deref())?;
    let scores = RelevanceScores::load(&a.scores)?;
    let golden: BTreeSet<PassageId> = golden_set(&l.examples);
    let points: Vec<SweepPoint> = index_size_sweep(&a.sizes, &scores, &golden, |set| {
        let sub = Arc::new(l.index.subset(&set.as_hash_set())?);
        Ok(p.with_index(sub).run_batch(&l.examples)?.report.value)
    })?;
    println!("{:>10} {:>8}", "size", "em");
    for pt in &points {
        println!("{:>10} {:>8.2}", pt.size, 100.0 * pt.em);
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&points)?)?;
    }
    Ok(())
}

fn e2e(cli: &Cli, a: &E2eArgs) -> Result<()> {
    let l = load_data(&a.data)?;
    let mut cfg = load_config(cli)?;
    if let Some(m) = &a.mode {
        cfg.fusion = m.parse()?;
    }
    let p = with_models(pipeline(&l, cfg)?, a.aggr.as_deref(), a.bd.as_deref())?;
    if let Some(path) = &a.trace {
        let traces = l
            .examples
            .iter()
            .filter_map(|q| p.run_question(q).ok())
            .collect::<Vec<_>>();
        write_jsonl(path, &traces)?;
    }
    let r = p.run_batch(&l.examples)?;
    if let Some(path) = &a.predictions {
        write_predictions(path, &l.examples, &r.predictions)?;
    }
    if let Some(path) = &a.report {
        r.report.save(path)?;
    }
    print_report(&r);
    Ok(())
}
