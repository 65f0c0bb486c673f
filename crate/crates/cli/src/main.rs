use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mrag_core::curation::{self, CurationDeps, QAPair, SelectionRule, DEFAULT_TIE_ORDER};
use mrag_core::embedding::Embedder;
use mrag_core::eval_metrics::{score_predictions, Metric, Prediction};
use mrag_core::flat_retriever::{self, FlatIndex, IndexedKb};
use mrag_core::generation::{AnswerStyle, Generator, MockFixtures};
use mrag_core::kb_store::{self, KnowledgeBase, Modality};
use mrag_core::pipeline::{EvalReport, Pipeline, Query, RouterSource};
use mrag_core::router::{self, Decision, RouterModel};
use mrag_core::{jsonl, Error};
use serde::Serialize;

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mrag", version, about = "Adaptive multimodal retrieval-augmented generation toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    metric: Option<Metric>,
    #[arg(long, global = true)]
    answer_style: Option<AnswerStyle>,
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    #[arg(long, global = true)]
    visual_kb: Option<PathBuf>,
    #[arg(long, global = true)]
    textual_kb: Option<PathBuf>,
    #[arg(long, global = true)]
    visual_index: Option<PathBuf>,
    #[arg(long, global = true)]
    textual_index: Option<PathBuf>,
    #[arg(long, global = true)]
    router_model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base ingestion and statistics.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Build or describe flat vector indexes.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Top-k search over an index.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        image: Option<String>,
    },
    /// Train, apply or inspect the retrieval router.
    #[command(subcommand)]
    Router(RouterCommand),
    /// Build routing and tuning datasets from a QA set.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Answer scoring.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// End-to-end answering and evaluation.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// MRR, Recall, mAP and NDCG of a TREC run against qrels.
    IrMetrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Validate a document file and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        output: PathBuf,
    },
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        modality: Modality,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        output: PathBuf,
    },
    Info {
        #[arg(long)]
        index: PathBuf,
    },
}

#[derive(Subcommand)]
enum RouterCommand {
    Train {
        /// Lines of `{"question", "label"}`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    Route {
        #[arg(long)]
        query: String,
    },
    Inspect,
}

#[derive(Subcommand)]
enum CurateCommand {
    /// Score the three strategies for every pair.
    Assess {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        skips: Option<PathBuf>,
    },
    /// Router training data plus the scoring ledger.
    Windsock {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        skips: Option<PathBuf>,
    },
    /// Tuning examples from each pair's weaker retrieval modality.
    Dance {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "challenging")]
        strategy: SelectionRule,
        #[arg(long)]
        skips: Option<PathBuf>,
    },
    /// Five-document noisy contexts around each pair's gold documents.
    Noise {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Score a file of `{"prediction", "golds", "id"?}` lines.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        per_item: bool,
    },
}

#[derive(Args)]
struct RoutingArgs {
    /// Skip the router and force this decision.
    #[arg(long)]
    decision: Option<Decision>,
}

#[derive(Subcommand)]
enum PipelineCommand {
    Answer {
        #[arg(long)]
        query: String,
        #[arg(long)]
        image: Option<String>,
        #[command(flatten)]
        routing: RoutingArgs,
    },
    Eval {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[command(flatten)]
        routing: RoutingArgs,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Fixed NA, Visual and Textual strategies against the router.
    Compare {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also compare the fixed Hybrid strategy.
        #[arg(long)]
        hybrid: bool,
    },
    /// Stage latency breakdown and decision ratios.
    Bench {
        #[arg(long)]
        qaset: Option<PathBuf>,
        #[command(flatten)]
        routing: RoutingArgs,
    },
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if let Some(m) = g.metric {
        cfg.metric = m;
    }
    if let Some(s) = g.answer_style {
        cfg.answer_style = s;
    }
    if let Some(n) = g.max_in_flight {
        cfg.max_in_flight = n;
    }
    let p = &mut cfg.paths;
    for (flag, slot) in [
        (&g.visual_kb, &mut p.visual_kb),
        (&g.textual_kb, &mut p.textual_kb),
        (&g.visual_index, &mut p.visual_index),
        (&g.textual_index, &mut p.textual_index),
        (&g.router_model, &mut p.router_model),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })?;
    Ok(())
}

struct Loaded {
    embedder: Embedder,
    visual: IndexedKb,
    textual: IndexedKb,
}

fn load_indexes(cfg: &RunConfig) -> Result<Loaded> {
    let embedder = Embedder::new(cfg.embedder.clone())?;
    let p = &cfg.paths;
    let load = |kb: &Option<PathBuf>, idx: &Option<PathBuf>, m: Modality| -> Result<IndexedKb> {
        let kb_path = cfg.require_path(None, kb, &format!("{m}_kb"))?;
        let idx_path = cfg.require_path(None, idx, &format!("{m}_index"))?;
        let kb = kb_store::load_kb(kb_path, m)?;
        let index = FlatIndex::load(idx_path)?;
        Ok(IndexedKb::new(kb, index)?)
    };
    Ok(Loaded {
        visual: load(&p.visual_kb, &p.visual_index, Modality::Visual)?,
        textual: load(&p.textual_kb, &p.textual_index, Modality::Textual)?,
        embedder,
    })
}

fn load_qaset(cfg: &RunConfig, flag: Option<&Path>) -> Result<Vec<QAPair>> {
    Ok(curation::read_qaset(cfg.require_path(flag, &cfg.paths.qaset, "qaset")?)?)
}

fn generator(cfg: &RunConfig, fixtures: MockFixtures) -> Result<Box<dyn Generator>> {
    Ok(cfg.generator.build(fixtures)?)
}

fn write_skips(path: Option<&Path>, skips: &[curation::SkipRecord]) -> Result<()> {
    if !skips.is_empty() {
        eprintln!("skipped {} pair(s)", skips.len());
    }
    if let Some(path) = path {
        jsonl::write_file(path, skips)?;
    }
    Ok(())
}

fn curation_deps<'a>(cfg: &RunConfig, l: &'a Loaded, gen: &'a dyn Generator) -> CurationDeps<'a> {
    CurationDeps {
        answer_style: cfg.answer_style,
        k: cfg.k,
        metric: cfg.metric,
        max_in_flight: cfg.max_in_flight,
        ..CurationDeps::new(&l.visual, &l.textual, &l.embedder, gen)
    }
}

fn router_source(cfg: &RunConfig, routing: &RoutingArgs) -> Result<RouterSource> {
    if let Some(d) = routing.decision {
        return Ok(RouterSource::Fixed(d));
    }
    let path = cfg.require_path(None, &cfg.paths.router_model, "router_model")?;
    Ok(RouterSource::Model(Box::new(RouterModel::load(path)?)))
}

fn pipeline<'a>(cfg: &RunConfig, router: RouterSource, l: &'a Loaded, gen: &'a dyn Generator) -> Result<Pipeline<'a>> {
    let mut p = Pipeline::new(router, &l.visual, &l.textual, &l.embedder, gen)?;
    p.answer_style = cfg.answer_style;
    p.k = cfg.k;
    p.metric = cfg.metric;
    p.max_in_flight = cfg.max_in_flight;
    p.validate()?;
    Ok(p)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_report_table(rows: &[EvalReport]) {
    println!(
        "{:<10} {:>6} {:>8} {:>7} {:>7} {:>7} {:>10} {:>12} {:>11} {:>10}",
        "strategy", "count", "metric", "NA", "Visual", "Textual", "route_ms", "retrieval_ms", "generate_ms", "total_ms"
    );
    for r in rows {
        let m = &r.mean_timings;
        println!(
            "{:<10} {:>6} {:>8.4} {:>7.3} {:>7.3} {:>7.3} {:>10.3} {:>12.3} {:>11.3} {:>10.3}",
            r.strategy,
            r.count,
            r.overall,
            r.ratio(Decision::Na),
            r.ratio(Decision::Visual),
            r.ratio(Decision::Textual),
            m.route_ms,
            m.retrieval_ms,
            m.generate_ms,
            m.total_ms
        );
    }
}

fn print_decisions(r: &EvalReport) {
    println!("{:<8} {:>6} {:>7} {:>8}", "decision", "count", "ratio", r.metric);
    for d in &r.decisions {
        println!("{:<8} {:>6} {:>7.4} {:>8}", d.decision, d.count, d.ratio, fmt_opt(d.metric_mean));
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Kb(KbCommand::Ingest { input, modality, output }) => {
            let kb = kb_store::load_kb(&input, modality)?;
            kb_store::save_kb(&kb, &output)?;
            print_json(&kb_store::kb_stats(&kb))?;
        }
        Command::Kb(KbCommand::Stats { input, modality }) => {
            print_json(&kb_store::kb_stats(&kb_store::load_kb(&input, modality)?))?;
        }
        Command::Index(IndexCommand::Build { kb, modality, output }) => {
            let embedder = Embedder::new(cfg.embedder.clone())?;
            let kb = kb_store::load_kb(&kb, modality)?;
            let index = flat_retriever::build_index(&kb, &embedder)?;
            index.save(&output)?;
            print_json(&index.manifest())?;
        }
        Command::Index(IndexCommand::Info { index }) => {
            print_json(&flat_retriever::read_manifest(&index)?)?;
        }
        Command::Search { index, query, image } => {
            let embedder = Embedder::new(cfg.embedder.clone())?;
            let index = FlatIndex::load(&index)?;
            if index.fingerprint() != embedder.fingerprint() {
                return Err(Error::Config(format!(
                    "index was built with {:?}, embedder is {:?}",
                    index.fingerprint(),
                    embedder.fingerprint()
                ))
                .into());
            }
            let q = embedder.embed_query(&query, image.as_deref())?;
            println!("rank\tid\tscore");
            for hit in index.search(&q, cfg.k)? {
                println!("{}\t{}\t{:.6}", hit.rank, hit.id, hit.score);
            }
        }
        Command::Router(RouterCommand::Train { data, output, epochs }) => {
            let mut train = cfg.router.clone();
            train.seed = cfg.require_seed("router train")?;
            if let Some(e) = epochs {
                train.epochs = e;
            }
            let examples = router::read_examples(&data)?;
            let trained = router::train_router(&examples, &train)?;
            for (i, loss) in trained.report.epoch_losses.iter().enumerate() {
                println!("epoch {}\tloss {:.6}", i + 1, loss);
            }
            for (d, w) in &trained.report.class_weights {
                println!("class_weight {d}\t{w:.6}");
            }
            trained.model.save(&output)?;
        }
        Command::Router(RouterCommand::Route { query }) => {
            let path = cfg.require_path(None, &cfg.paths.router_model, "router_model")?;
            let routing = RouterModel::load(path)?.route(&query)?;
            println!("decision\t{}", routing.decision);
            for (d, p) in &routing.probabilities {
                println!("p({d})\t{p:.6}");
            }
        }
        Command::Router(RouterCommand::Inspect) => {
            let path = cfg.require_path(None, &cfg.paths.router_model, "router_model")?;
            print_json(&RouterModel::load(path)?.summary())?;
        }
        Command::Curate(CurateCommand::Assess { qaset, output, skips }) => {
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let deps = curation_deps(&cfg, &loaded, gen.as_ref());
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                scores: curation::StrategyScores,
                visual_doc_ids: Vec<&'a str>,
                textual_doc_ids: Vec<&'a str>,
            }
            let results = curation::assess_qaset(&qaset, &deps)?;
            let mut rows = Vec::new();
            let mut skipped = Vec::new();
            for (qa, r) in qaset.iter().zip(&results) {
                match r {
                    Ok(a) => rows.push(Row {
                        id: &qa.id,
                        scores: a.scores.clone(),
                        visual_doc_ids: a.visual_docs.iter().map(|d| d.scored.id.as_str()).collect(),
                        textual_doc_ids: a.textual_docs.iter().map(|d| d.scored.id.as_str()).collect(),
                    }),
                    Err(s) => skipped.push(s.clone()),
                }
            }
            jsonl::write_file(&output, &rows)?;
            write_skips(skips.as_deref(), &skipped)?;
            println!("assessed {} pair(s)", rows.len());
        }
        Command::Curate(CurateCommand::Windsock { qaset, output, ledger, skips }) => {
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let ds = curation::build_windsock_dataset(&qaset, &curation_deps(&cfg, &loaded, gen.as_ref()), &DEFAULT_TIE_ORDER)?;
            jsonl::write_file(&output, &ds.examples)?;
            jsonl::write_file(&ledger, &ds.ledger)?;
            write_skips(skips.as_deref(), &ds.skips)?;
            let mut counts: HashMap<Decision, usize> = HashMap::new();
            for e in &ds.examples {
                *counts.entry(e.label).or_default() += 1;
            }
            for d in DEFAULT_TIE_ORDER {
                println!("{d}\t{}", counts.get(&d).copied().unwrap_or(0));
            }
        }
        Command::Curate(CurateCommand::Dance { qaset, output, strategy, skips }) => {
            let seed = cfg.require_seed("curate dance")?;
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let ds = curation::build_dance_dataset(&qaset, &curation_deps(&cfg, &loaded, gen.as_ref()), seed, strategy)?;
            jsonl::write_file(&output, &ds.examples)?;
            write_skips(skips.as_deref(), &ds.skips)?;
            let ties = ds.examples.iter().filter(|e| e.tie_broken).count();
            println!("examples {}\ttie_broken {}", ds.examples.len(), ties);
        }
        Command::Curate(CurateCommand::Noise { qaset, output }) => {
            let seed = cfg.require_seed("curate noise")?;
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let mut kbs: Vec<KnowledgeBase> = Vec::new();
            if let Some(p) = &cfg.paths.visual_kb {
                kbs.push(kb_store::load_kb(p, Modality::Visual)?);
            }
            if let Some(p) = &cfg.paths.textual_kb {
                kbs.push(kb_store::load_kb(p, Modality::Textual)?);
            }
            if kbs.is_empty() {
                return Err(Error::Config("curate noise needs visual_kb and/or textual_kb".into()).into());
            }
            let refs: Vec<&KnowledgeBase> = kbs.iter().collect();
            let records = curation::build_noise_set(&qaset, &refs, seed)?;
            jsonl::write_file(&output, &records)?;
            println!("records {}", records.len());
        }
        Command::Eval(EvalCommand::Score { predictions, per_item }) => {
            let preds: Vec<Prediction> = jsonl::read_file(&predictions)?;
            let mut summary = score_predictions(&preds, cfg.metric)?;
            if !per_item {
                summary.per_item.clear();
            }
            print_json(&summary)?;
        }
        Command::Pipeline(PipelineCommand::Answer { query, image, routing }) => {
            let loaded = load_indexes(&cfg)?;
            let fixtures = match &cfg.paths.qaset {
                Some(p) => curation::mock_fixtures(&curation::read_qaset(p)?),
                None => MockFixtures::new(),
            };
            let gen = generator(&cfg, fixtures)?;
            let p = pipeline(&cfg, router_source(&cfg, &routing)?, &loaded, gen.as_ref())?;
            let trace = p.answer(&Query { id: None, text: query, image_path: image })?;
            print_json(&trace)?;
        }
        Command::Pipeline(PipelineCommand::Eval { qaset, routing, report, traces }) => {
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let p = pipeline(&cfg, router_source(&cfg, &routing)?, &loaded, gen.as_ref())?;
            let r = p.evaluate(&qaset)?;
            println!("overall {}\t{:.4}\tcount {}\tskips {}", r.metric, r.overall, r.count, r.skips.len());
            print_decisions(&r);
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            if let Some(path) = traces {
                jsonl::write_file(&path, r.traces.iter().map(|(t, _)| t).collect::<Vec<_>>())?;
            }
        }
        Command::Pipeline(PipelineCommand::Compare { qaset, report, hybrid }) => {
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let p = pipeline(&cfg, router_source(&cfg, &RoutingArgs { decision: None })?, &loaded, gen.as_ref())?;
            let mut fixed = vec![Decision::Na, Decision::Visual, Decision::Textual];
            if hybrid {
                fixed.push(Decision::Hybrid);
            }
            let rows = p.compare_strategies(&qaset, &fixed)?;
            print_report_table(&rows);
            if let Some(path) = report {
                write_json(&path, &rows)?;
            }
        }
        Command::Pipeline(PipelineCommand::Bench { qaset, routing }) => {
            let qaset = load_qaset(&cfg, qaset.as_deref())?;
            let loaded = load_indexes(&cfg)?;
            let gen = generator(&cfg, curation::mock_fixtures(&qaset))?;
            let p = pipeline(&cfg, router_source(&cfg, &routing)?, &loaded, gen.as_ref())?;
            let r = p.evaluate(&qaset)?;
            let m = &r.mean_timings;
            let pct = |x: f64| if m.total_ms > 0.0 { 100.0 * x / m.total_ms } else { 0.0 };
            println!("{:<10} {:>12} {:>8}", "stage", "mean_ms", "share");
            for (name, v) in [
                ("router", m.route_ms),
                ("embed", m.embed_ms),
                ("search", m.retrieve_ms),
                ("retrieval", m.retrieval_ms),
                ("generator", m.generate_ms),
                ("total", m.total_ms),
            ] {
                println!("{:<10} {:>12.4} {:>7.2}%", name, v, pct(v));
            }
            println!();
            print_decisions(&r);
        }
        Command::IrMetrics { run, qrels } => {
            let runs = flat_retriever::read_trec_run(&run)?;
            let qrels = flat_retriever::read_qrels(&qrels)?;
            print_json(&flat_retriever::retrieval_metrics(&runs, &qrels, cfg.k)?)?;
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn error_kind(e: &anyhow::Error) -> String {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Stage { stage, source }) => format!("{stage}.{}", source.kind()),
        Some(err) => err.kind().to_string(),
        None => "error".to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", error_kind(&e), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
