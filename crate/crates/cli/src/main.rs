//! `lum`: command-line driver for the three-stage pipeline.
//!
//! Every command reads and writes stable file names under `--out`. Usage and
//! configuration errors exit with 1, runtime errors with 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lum_core::config::{files, RunConfig};
use lum_core::datagen::{generate_synthetic_corpus, load_interactions, Corpus, SyntheticWorldConfig};
use lum_core::dlrm::{ItemEmbeddingTable, LumUsage, Ranker, RetrievalTowers};
use lum_core::eval::{
    bench_conditions, bench_group_query, bench_packing, bench_prefix, fit_scaling_law,
    skewed_corpus, write_plot_csv, BenchOptions, FitResult, ScalingPoint,
};
use lum_core::lum::{load_checkpoint, save_checkpoint, train, LumConfig, LumModel};
use lum_core::pipeline::{
    downstream_split, evaluate_ranker, evaluate_retrieval, export_interests, lum_recall,
    scaling_sweep_lengths, scaling_sweep_sizes, scenario_conditions, train_ranker,
    train_retrieval, DownstreamSplit, InterestArtifacts, RankingMetrics, RetrievalMetrics,
};
use lum_core::query::{
    condition_fingerprint, read_interest_log, write_interest_log, InterestCache, KnowledgeQuery,
    QueryEngine,
};
use lum_core::tokenize::ConditionFields;
use lum_core::{LumError, Result};

#[derive(Debug, Parser)]
#[command(name = "lum", version, about = "Large user model pipeline")]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Usage {
    None,
    Direct,
    DirectAndMatching,
}

impl From<Usage> for LumUsage {
    fn from(u: Usage) -> Self {
        match u {
            Usage::None => LumUsage::None,
            Usage::Direct => LumUsage::Direct,
            Usage::DirectAndMatching => LumUsage::DirectAndMatching,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus, or ingest an interactions CSV.
    GenData {
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        interactions: Option<PathBuf>,
    },
    /// Pre-train the LUM on each user's history.
    TrainLum {
        #[arg(long)]
        epochs: Option<usize>,
        /// Train without condition tokens (ablation).
        #[arg(long)]
        no_conditions: bool,
    },
    /// Query user interests under scenario conditions.
    Query {
        #[arg(long = "user")]
        users: Vec<u32>,
        #[arg(long = "scenario")]
        scenarios: Vec<u32>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Batch-infer the interest log and warm the interest cache.
    CacheWarm {
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        capacity: Option<usize>,
    },
    /// Train the ranker and the retrieval towers.
    TrainDlrm {
        #[arg(long, value_enum)]
        usage: Option<Usage>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the trained downstream models on held-out events.
    Evaluate {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the LUM at several widths or sequence budgets and fit R@K.
    ScaleSweep {
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Packing and group-query throughput benchmarks.
    Bench {
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(LumError),
}

impl From<LumError> for Failure {
    fn from(e: LumError) -> Self {
        match e {
            LumError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    match &cli.command {
        Command::GenData { strength, users, interactions } => {
            set(&mut cfg.datagen.condition_effect_strength, *strength);
            set(&mut cfg.datagen.num_users, *users);
            if interactions.is_some() {
                cfg.paths.interactions_csv = interactions.clone();
            }
        }
        Command::TrainLum { epochs, no_conditions } => {
            set(&mut cfg.lum.epochs, *epochs);
            if *no_conditions {
                cfg.lum.use_conditions = false;
            }
        }
        Command::Query { users, scenarios, top_k } => {
            if !users.is_empty() {
                cfg.query.users = users.clone();
            }
            if !scenarios.is_empty() {
                cfg.query.scenarios = scenarios.clone();
            }
            set(&mut cfg.query.top_k, *top_k);
        }
        Command::CacheWarm { top_k, capacity } => {
            set(&mut cfg.query.top_k, *top_k);
            if capacity.is_some() {
                cfg.query.cache_capacity = *capacity;
            }
        }
        Command::TrainDlrm { usage, epochs } => {
            set(&mut cfg.dlrm.lum_usage, usage.map(LumUsage::from));
            set(&mut cfg.dlrm.model.epochs, *epochs);
        }
        Command::Evaluate { k } => set(&mut cfg.dlrm.recall_k, *k),
        Command::ScaleSweep { dims, lengths } => {
            set(&mut cfg.sweep.model_dims, dims.clone());
            set(&mut cfg.sweep.sequence_lengths, lengths.clone());
        }
        Command::Bench { repetitions } => set(&mut cfg.bench.repetitions, *repetitions),
    }
    cfg.resolve_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cfg.paths.out).map_err(LumError::from)?;
    match cli.command {
        Command::GenData { .. } => gen_data(&cfg)?,
        Command::TrainLum { .. } => train_lum(&cfg)?,
        Command::Query { .. } => query(&cfg)?,
        Command::CacheWarm { .. } => cache_warm(&cfg)?,
        Command::TrainDlrm { .. } => train_dlrm(&cfg)?,
        Command::Evaluate { .. } => evaluate(&cfg)?,
        Command::ScaleSweep { .. } => scale_sweep(&cfg)?,
        Command::Bench { .. } => bench(&cfg)?,
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load_dir(&cfg.artifact(files::CORPUS_DIR))
}

fn load_split(cfg: &RunConfig) -> Result<(Corpus, DownstreamSplit)> {
    let corpus = load_corpus(cfg)?;
    let split = downstream_split(&corpus, cfg.dlrm.train_events)?;
    Ok((corpus, split))
}

fn load_lum(cfg: &RunConfig) -> Result<LumModel<f32>> {
    load_checkpoint(&cfg.artifact(files::LUM_CHECKPOINT))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let corpus = match &cfg.paths.interactions_csv {
        Some(p) => load_interactions(p)?,
        None => generate_synthetic_corpus(&cfg.datagen)?,
    };
    let dir = cfg.artifact(files::CORPUS_DIR);
    corpus.save_dir(&dir)?;
    println!(
        "corpus: {} users, {} items, {} events -> {}",
        corpus.num_users(),
        corpus.vocab.num_items,
        corpus.num_events(),
        dir.display()
    );
    Ok(())
}

fn train_lum(cfg: &RunConfig) -> Result<()> {
    let (_, split) = load_split(cfg)?;
    let (model, report) = train(&split.history, &cfg.lum)?;
    let version = save_checkpoint(&model, &cfg.artifact(files::LUM_CHECKPOINT))?;
    report.write_jsonl(&cfg.artifact(files::TRAIN_REPORT))?;
    println!(
        "lum {version}: {} parameters, epoch losses {:?}, {:.0} tokens/s",
        model.num_parameters(),
        report.epoch_mean_loss,
        report.tokens_per_sec()
    );
    Ok(())
}

#[derive(Serialize)]
struct QueryLine<'a> {
    user_id: u32,
    condition: &'a ConditionFields,
    model_version: &'a str,
    o: &'a [f32],
    top_k: &'a [(u32, f32)],
}

fn query(cfg: &RunConfig) -> Result<()> {
    let (corpus, split) = load_split(cfg)?;
    let model = load_lum(cfg)?;
    let engine = QueryEngine::new(&model, &split.history.items)?;
    let users = if cfg.query.users.is_empty() {
        split.history.users.keys().copied().collect()
    } else {
        cfg.query.users.clone()
    };
    let conditions: Vec<ConditionFields> = if cfg.query.scenarios.is_empty() {
        scenario_conditions(&corpus.vocab)
    } else {
        cfg.query.scenarios.iter().map(|&s| ConditionFields::scenario(s)).collect()
    };
    let mut out = String::new();
    for &u in &users {
        if !split.history.users.contains_key(&u) {
            return Err(LumError::InvalidInput(format!("user {u} is not in the corpus")));
        }
        let queries = conditions
            .iter()
            .map(|c| KnowledgeQuery::new(u, c.clone()))
            .collect::<Result<Vec<_>>>()?;
        let results = engine.query_group(split.history.history(u), &queries, cfg.query.top_k)?;
        for (c, r) in conditions.iter().zip(&results) {
            let line = QueryLine {
                user_id: u,
                condition: c,
                model_version: &r.model_version,
                o: &r.o,
                top_k: &r.top_k,
            };
            out += &serde_json::to_string(&line)?;
            out.push('\n');
            let ids: Vec<u32> = r.top_k.iter().map(|p| p.0).collect();
            println!("user {u} scenario {}: {ids:?}", c.scenario_id);
        }
    }
    fs::write(cfg.artifact(files::QUERY_RESULTS), out)?;
    Ok(())
}

fn cache_warm(cfg: &RunConfig) -> Result<()> {
    let (corpus, split) = load_split(cfg)?;
    let model = load_lum(cfg)?;
    let art = export_interests(&model, &split.history, &scenario_conditions(&corpus.vocab), cfg.query.top_k)?;
    write_interest_log(&cfg.artifact(files::INTEREST_LOG), &art.records)?;
    art.items.save(&cfg.artifact(files::ITEM_EMBEDDINGS))?;
    let cache = InterestCache::new(cfg.query.cache_capacity);
    let warmed = cache.warm(&art.records)?;
    cache.persist(&cfg.artifact(files::CACHE))?;
    println!(
        "interest log: {} records for model {}; cache holds {warmed}",
        art.records.len(),
        art.items.model_version
    );
    Ok(())
}

/// The interest log and item table written by `cache-warm`, in the condition
/// order `cache-warm` queried.
fn load_interests(cfg: &RunConfig, corpus: &Corpus) -> Result<InterestArtifacts> {
    let records = read_interest_log(&cfg.artifact(files::INTEREST_LOG))?;
    let items = ItemEmbeddingTable::load(&cfg.artifact(files::ITEM_EMBEDDINGS))?;
    if let Some(r) = records.iter().find(|r| r.model_version != items.model_version) {
        return Err(LumError::InvalidInput(format!(
            "interest log is from model {} but the item table from {}; rerun `cache-warm`",
            r.model_version, items.model_version
        )));
    }
    Ok(InterestArtifacts {
        records,
        condition_fps: scenario_conditions(&corpus.vocab).iter().map(condition_fingerprint).collect(),
        items,
    })
}

#[derive(Serialize)]
struct DlrmReport {
    lum_usage: LumUsage,
    ranker_version: String,
    retrieval_version: String,
    ranking: RankingMetrics,
    retrieval: RetrievalMetrics,
}

fn train_dlrm(cfg: &RunConfig) -> Result<()> {
    let (corpus, split) = load_split(cfg)?;
    let usage = cfg.dlrm.lum_usage;
    let lum = match usage {
        LumUsage::None => None,
        _ => Some(load_interests(cfg, &corpus)?),
    };
    let (ranker, ranking) = train_ranker(&split, lum.as_ref(), usage, &cfg.dlrm.model)?;
    let (towers, retrieval) = train_retrieval(&split, lum.as_ref(), &cfg.dlrm.model, cfg.dlrm.recall_k)?;
    let report = DlrmReport {
        lum_usage: usage,
        ranker_version: ranker.save(&cfg.artifact(files::RANKER))?,
        retrieval_version: towers.save(&cfg.artifact(files::RETRIEVAL))?,
        ranking,
        retrieval,
    };
    write_json(&cfg.artifact(files::DLRM_METRICS), &report)?;
    println!(
        "ranker AUC {:.4}, retrieval R@{} {:.4}",
        ranking.auc, retrieval.k, retrieval.recall_at_k
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    ranking: RankingMetrics,
    retrieval: RetrievalMetrics,
    /// Retrieval straight from LUM queries, when a LUM checkpoint exists.
    lum_retrieval: Option<RetrievalMetrics>,
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (corpus, split) = load_split(cfg)?;
    let ranker = Ranker::load(&cfg.artifact(files::RANKER))?;
    let towers = RetrievalTowers::load(&cfg.artifact(files::RETRIEVAL))?;
    let lum = if ranker.usage != LumUsage::None || towers.use_lum {
        Some(load_interests(cfg, &corpus)?)
    } else {
        None
    };
    let ranker_lum = lum.as_ref().filter(|_| ranker.usage != LumUsage::None);
    let towers_lum = lum.as_ref().filter(|_| towers.use_lum);
    let ckpt = cfg.artifact(files::LUM_CHECKPOINT);
    let lum_retrieval = if ckpt.exists() {
        let model = load_lum(cfg)?;
        Some(lum_recall(&model, &split.history, &split.test, cfg.dlrm.recall_k)?)
    } else {
        None
    };
    let report = EvalReport {
        ranking: evaluate_ranker(&ranker, &split, ranker_lum)?,
        retrieval: evaluate_retrieval(&towers, &split, towers_lum, cfg.dlrm.recall_k)?,
        lum_retrieval,
    };
    write_json(&cfg.artifact(files::EVAL_REPORT), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct Sweep {
    points: Vec<ScalingPoint>,
    fit: Option<FitResult>,
}

#[derive(Serialize)]
struct ScalingReport {
    k: usize,
    model_dims: Vec<usize>,
    sizes: Option<Sweep>,
    sequence_lengths: Vec<usize>,
    lengths: Option<Sweep>,
}

fn sweep(points: Vec<ScalingPoint>, plot: &Path) -> Result<Sweep> {
    let fit = if points.len() >= 2 {
        let f = fit_scaling_law(&points)?;
        write_plot_csv(plot, &points, &f)?;
        Some(f)
    } else {
        None
    };
    for p in &points {
        println!("x {:>10.0}  R@K {:.4}", p.x, p.y);
    }
    if let Some(f) = &fit {
        println!("fit: R = {:.4} ln(x) + {:.4}, R2 {:.3}", f.a, f.b, f.r_squared);
    }
    Ok(Sweep { points, fit })
}

fn scale_sweep(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sweep;
    if s.model_dims.is_empty() && s.sequence_lengths.is_empty() {
        return Err(LumError::InvalidConfig(
            "scale-sweep needs sweep.model_dims or sweep.sequence_lengths".into(),
        ));
    }
    let corpus = load_corpus(cfg)?;
    let sizes = if s.model_dims.is_empty() {
        None
    } else {
        let pts = scaling_sweep_sizes(&corpus, &cfg.lum, &s.model_dims, s.holdout_events, s.k)?;
        Some(sweep(pts, &cfg.artifact(files::SCALING_PLOT))?)
    };
    let lengths = if s.sequence_lengths.is_empty() {
        None
    } else {
        let pts = scaling_sweep_lengths(&corpus, &cfg.lum, &s.sequence_lengths, s.holdout_events, s.k)?;
        Some(sweep(pts, &cfg.artifact(files::SCALING_LENGTHS_PLOT))?)
    };
    write_json(
        &cfg.artifact(files::SCALING_REPORT),
        &ScalingReport {
            k: s.k,
            model_dims: s.model_dims.clone(),
            sizes,
            sequence_lengths: s.sequence_lengths.clone(),
            lengths,
        },
    )
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.bench;
    let opts = BenchOptions {
        warmup: b.warmup,
        repetitions: b.repetitions,
    };
    let skewed = skewed_corpus(b.skewed_users, b.max_tokens, cfg.datagen.rng_seed)?;
    let packing = bench_packing(
        &skewed,
        &LumConfig {
            max_sequence_tokens: b.max_tokens,
            ..cfg.lum.clone()
        },
        &opts,
    )?;
    packing.write_json(&cfg.artifact(files::BENCH_PACKING))?;
    let events = b.prefix_tokens.div_ceil(2).max(1);
    let long = generate_synthetic_corpus(&SyntheticWorldConfig {
        num_users: 2,
        events_per_user_range: [events, events],
        rng_seed: cfg.datagen.rng_seed,
        ..cfg.datagen.clone()
    })?;
    let model = LumModel::<f32>::new(
        LumConfig {
            max_sequence_tokens: b.prefix_tokens + 2,
            ..cfg.lum.clone()
        },
        long.vocab,
    )?;
    let prefix = bench_prefix(&long, b.prefix_tokens)?;
    let conditions = bench_conditions(long.vocab.num_scenarios - 1, b.group_queries);
    let group = bench_group_query(&model, &prefix, &conditions, &opts)?;
    group.write_json(&cfg.artifact(files::BENCH_GROUP_QUERY))?;
    for r in [&packing, &group] {
        println!(
            "{}: {:.2}x ({:.1} vs {:.1} per second){}",
            r.name,
            r.speedup,
            r.throughput,
            r.baseline_throughput,
            if r.noisy() { ", noisy" } else { "" }
        );
    }
    Ok(())
}
