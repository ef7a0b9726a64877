//! `copersona` command-line interface.
//!
//! Run-scoped commands operate on the same store as the HTTP service and take
//! its lock file. File-scoped commands (`filter`, `expand`, `clean`, `stats`,
//! `extract --input`, `classify --input`, `evaluate --gold`) work on plain
//! files and never touch a store.
//!
//! Failures print one line to stderr, `error: kind=<kind> message="<text>"`,
//! and exit with status 1. Usage errors exit with status 2.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use copersona_core::classifier::{load_categories, Classifier, ThresholdPolicy, TokenFeatureStrategy};
use copersona_core::corpus::{
    clean, corpus_stats, dedup_users, expand_user_posts, filter_relevant, load_lexicon, load_posts,
    CleaningConfig, InputFormat, KeywordFramework, MatchMode, PostCollection, StatsComparison,
    StatsOptions,
};
use copersona_core::embedding::EmbeddingStore;
use copersona_core::extraction::{extract_batched, sample_posts, CostarTemplate, MockClient};
use copersona_core::pipeline::{
    evaluate_labels, load_labels, Phase, PhaseOptions, Pipeline, PipelineConfig, PipelineError,
};
use copersona_core::store::{Store, StoreLock};
use copersona_core::textproc::{StopwordSet, TextPipeline};
use copersona_core::validation::Stage;

#[derive(Parser)]
#[command(name = "copersona", version, about = "Persona discovery pipeline")]
struct Cli {
    /// Store root shared with the service.
    #[arg(long, global = true, env = "COPERSONA_STORE", default_value = "copersona-store")]
    store: PathBuf,
    /// Log filter, e.g. `info` or `copersona_core=debug`.
    #[arg(long, global = true, env = "COPERSONA_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run from a pipeline config and print its id.
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// Load the raw corpus into a run (creates the run when given --config).
    Ingest(RunOrConfig),
    /// Keep posts matching the keyword framework (D1).
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect the most recent posts of every D1 author (raw D2).
    Expand {
        /// Full post store to draw from.
        #[arg(long)]
        posts: PathBuf,
        /// Keyword-matched posts whose authors are expanded.
        #[arg(long)]
        d1: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the cleaning rules (D2-1).
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics, optionally compared against a baseline corpus.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the collection phase (filter, dedup, expand, clean, stats).
    Collect(RunArg),
    /// Extract a taxonomy draft with the LLM client (or canned responses).
    Extract(ExtractArgs),
    /// Review queue and decision import/export.
    #[command(subcommand)]
    Review(ReviewCmd),
    /// Process review outcomes: record approval or build the next draft.
    Validate(RunArg),
    /// Classify posts with an approved taxonomy.
    Classify(ClassifyArgs),
    /// Agreement report against expert labels.
    Evaluate(EvaluateArgs),
    /// Run phases until the run is done or waiting for review.
    Run(RunArg),
    /// Show a run record.
    Status(RunArg),
    /// Start the HTTP API.
    Serve {
        #[arg(long, env = "COPERSONA_PORT", default_value_t = copersona_service::DEFAULT_PORT)]
        port: u16,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Union,
    Pairwise,
}

#[derive(Args)]
struct RunArg {
    #[arg(long)]
    run: String,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct RunOrConfig {
    #[arg(long)]
    run: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, conflicts_with = "input")]
    run: Option<String>,
    /// D2-1 posts for store-less extraction.
    #[arg(long, requires = "template")]
    input: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Answer from canned responses in this directory instead of the network.
    /// Without a value, the run's configured mock directory is used.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    mock: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    sample_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    batch_size: usize,
    #[arg(long, default_value_t = 2)]
    retries: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReviewCmd {
    /// Pending items.
    Queue {
        #[arg(long)]
        run: Option<String>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Write decisions as line-delimited JSON.
    Export {
        #[arg(long)]
        run: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply line-delimited decisions in order.
    Import {
        #[arg(long)]
        run: String,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Structural,
    DomainExpert,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long, conflicts_with = "input")]
    run: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Posts for store-less classification.
    #[arg(long, requires_all = ["categories", "embeddings"])]
    input: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "max-token")]
    strategy: StrategyArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    MaxToken,
    MeanPostVector,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, conflicts_with_all = ["gold", "pred"])]
    run: Option<String>,
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    #[arg(long, requires = "gold")]
    pred: Option<PathBuf>,
    /// Label order; defaults to first appearance in the gold file.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Print the JSON record instead of the table.
    #[arg(long)]
    json: bool,
}

struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    fn new(kind: &str, message: impl ToString) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::new(e.kind(), e)
    }
}

macro_rules! from_error {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e)
            }
        })*
    };
}

from_error! {
    io::Error => "io",
    copersona_core::corpus::CorpusError => "corpus",
    copersona_core::textproc::TextError => "text",
    copersona_core::embedding::EmbeddingError => "embedding",
    copersona_core::classifier::ClassifierError => "classifier",
    copersona_core::metrics::MetricsError => "metrics",
    copersona_core::store::StoreError => "store",
    copersona_service::ServiceError => "service",
}

impl From<copersona_core::extraction::ExtractionError> for CliError {
    fn from(e: copersona_core::extraction::ExtractionError) -> Self {
        PipelineError::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(io::stderr)
        .with_ansi(false)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
            eprintln!("error: kind={} message=\"{message}\"", e.kind);
            ExitCode::FAILURE
        }
    }
}

fn open_store(root: &Path) -> CliResult<(Store, StoreLock)> {
    let store = Store::open(root)?;
    let lock = store.lock()?;
    Ok((store, lock))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult {
    match out {
        Some(path) => fs::write(path, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    Ok(())
}

fn read_corpus(path: &Path) -> CliResult<PostCollection> {
    let (posts, report) = load_posts(path, InputFormat::Jsonl)?;
    for e in &report.errors {
        tracing::warn!(line = e.line, message = %e.message, "skipped record");
    }
    Ok(posts)
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Init { config } => {
            let (store, _lock) = open_store(&cli.store)?;
            let run = Pipeline::new(store).create_run(PipelineConfig::load(config)?)?;
            println!("{}", run.run_id);
            Ok(())
        }
        Command::Ingest(target) => {
            let (store, _lock) = open_store(&cli.store)?;
            let p = Pipeline::new(store);
            let run_id = match (target.run, target.config) {
                (Some(id), _) => id,
                (None, Some(cfg)) => p.create_run(PipelineConfig::load(cfg)?)?.run_id,
                (None, None) => unreachable!("clap enforces the group"),
            };
            let run = p.run_phase(&run_id, Some(Phase::Ingest), PhaseOptions::default())?;
            let report = p.store().read(&run.latest("ingest_report").expect("registered").path)?;
            println!("{}", run.run_id);
            eprintln!("{}", String::from_utf8_lossy(&report));
            Ok(())
        }
        Command::Filter { input, keywords, mode, out } => {
            let mut fw = KeywordFramework::load(keywords)?;
            if let Some(m) = mode {
                fw = fw.with_mode(match m {
                    Mode::Union => MatchMode::Union,
                    Mode::Pairwise => MatchMode::Pairwise,
                });
            }
            let d1 = filter_relevant(&read_corpus(&input)?, &fw);
            eprintln!("D1: {} posts", d1.len());
            emit(out.as_deref(), &d1.to_jsonl())
        }
        Command::Expand { posts, d1, k, out } => {
            let users = dedup_users(&read_corpus(&d1)?);
            let (d2, report) = expand_user_posts(&read_corpus(&posts)?, &users, k)?;
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            emit(out.as_deref(), &d2.to_jsonl())
        }
        Command::Clean { input, rules, out } => {
            let rules = match rules {
                Some(p) => CleaningConfig::load(p)?,
                None => CleaningConfig::default(),
            };
            let (d21, report) = clean(&read_corpus(&input)?, &rules);
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            emit(out.as_deref(), &d21.to_jsonl())
        }
        Command::Stats { input, lexicon, keywords, baseline } => {
            let lex = load_lexicon(lexicon)?;
            let fw = KeywordFramework::load(keywords)?;
            let stats = corpus_stats(&read_corpus(&input)?, &lex, &fw, StatsOptions::default())?;
            match baseline {
                None => print_json(&stats),
                Some(b) => {
                    let base = corpus_stats(&read_corpus(&b)?, &lex, &fw, StatsOptions::default())?;
                    let cmp = StatsComparison::between(&base, &stats);
                    print_json(&serde_json::json!({"baseline": base, "corpus": stats, "comparison": cmp}))
                }
            }
        }
        Command::Collect(r) => phase(&cli.store, &r.run, Phase::Collect, PhaseOptions::default()),
        Command::Validate(r) => {
            let (store, _lock) = open_store(&cli.store)?;
            let p = Pipeline::new(store);
            let run = p.run_phase(&r.run, Some(Phase::Validate), PhaseOptions::default())?;
            let board = p.board(&r.run)?;
            print_json(&serde_json::json!({
                "run_id": run.run_id, "phase": run.phase, "board_state": board.state,
                "round": board.round, "current_draft": run.current_draft,
                "approved_draft": run.approved_draft, "pending_items": board.queue().len(),
            }))
        }
        Command::Extract(args) => extract(&cli.store, args),
        Command::Review(cmd) => review(&cli.store, cmd),
        Command::Classify(args) => classify(&cli.store, args),
        Command::Evaluate(args) => evaluate(&cli.store, args),
        Command::Run(r) => {
            let (store, _lock) = open_store(&cli.store)?;
            let p = Pipeline::new(store);
            let run = p.advance(&r.run)?;
            if run.phase == Phase::Validate {
                let board = p.board(&r.run)?;
                eprintln!("waiting for review: {} pending items ({})", board.queue().len(), board.state);
            }
            println!("{}", run.phase);
            Ok(())
        }
        Command::Status(r) => {
            let p = Pipeline::new(Store::open(&cli.store)?);
            print_json(&p.load_run(&r.run)?)
        }
        Command::Serve { port } => {
            let config = copersona_service::ServiceConfig {
                store_root: cli.store,
                port,
                bind: [127, 0, 0, 1],
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(copersona_service::serve(config))?;
            Ok(())
        }
    }
}

fn phase(root: &Path, run_id: &str, phase: Phase, opts: PhaseOptions) -> CliResult {
    let (store, _lock) = open_store(root)?;
    let run = Pipeline::new(store).run_phase(run_id, Some(phase), opts)?;
    println!("{}", run.phase);
    Ok(())
}

fn extract(root: &Path, args: ExtractArgs) -> CliResult {
    if let Some(run_id) = args.run {
        let (store, _lock) = open_store(root)?;
        let mut p = Pipeline::new(store);
        if let Some(dir) = args.mock.filter(|d| !d.as_os_str().is_empty()) {
            p = p.with_client(Arc::new(MockClient::from_dir(dir)?));
        }
        let run = p.run_phase(&run_id, Some(Phase::Extract), PhaseOptions::default())?;
        let draft = p.load_draft(run.current_draft.as_deref().expect("extract sets a draft"))?;
        return emit(args.out.as_deref(), draft.to_json_pretty().as_bytes());
    }
    let (Some(input), Some(template)) = (args.input, args.template) else {
        return Err(CliError::new("usage", "extract needs --run or --input with --template"));
    };
    let Some(mock) = args.mock.filter(|d| !d.as_os_str().is_empty()) else {
        return Err(CliError::new(
            "usage",
            "store-less extraction needs --mock <dir>; use --run for a configured client",
        ));
    };
    let client = MockClient::from_dir(mock)?;
    let posts = read_corpus(&input)?;
    let n = args.sample_size.min(posts.len());
    let sample = sample_posts(&posts, n, args.seed)?;
    let template = CostarTemplate::load(template)?;
    let (draft, merge) = extract_batched(&client, &sample.posts, &template, args.batch_size, args.retries)?;
    for c in &merge.conflicts {
        tracing::warn!(conflict = %c, "merge conflict");
    }
    let mut bytes = draft.to_json_pretty().into_bytes();
    bytes.push(b'\n');
    emit(args.out.as_deref(), &bytes)
}

fn review(root: &Path, cmd: ReviewCmd) -> CliResult {
    let (store, _lock) = open_store(root)?;
    let p = Pipeline::new(store);
    match cmd {
        ReviewCmd::Queue { run, stage } => {
            let stage = stage.map(|s| match s {
                StageArg::Structural => Stage::Structural,
                StageArg::DomainExpert => Stage::DomainExpert,
            });
            for entry in p.queue(run.as_deref(), stage)? {
                println!("{}", serde_json::to_string(&entry).expect("serializable"));
            }
            Ok(())
        }
        ReviewCmd::Export { run, out } => emit(out.as_deref(), p.export_decisions(&run)?.as_bytes()),
        ReviewCmd::Import { run, input } => {
            let report = p.import_decisions(&run, &fs::read_to_string(input)?)?;
            print_json(&report)?;
            match report.errors.first() {
                None => Ok(()),
                Some((line, msg)) => Err(CliError::new(
                    "validation",
                    format!("{} decision(s) rejected; first at line {line}: {msg}", report.errors.len()),
                )),
            }
        }
    }
}

fn classify(root: &Path, args: ClassifyArgs) -> CliResult {
    if let Some(run_id) = args.run {
        let (store, _lock) = open_store(root)?;
        let p = Pipeline::new(store);
        let run = p.run_phase(
            &run_id,
            Some(Phase::Classify),
            PhaseOptions {
                threshold: args.threshold,
            },
        )?;
        let results = run.latest("classification").expect("registered");
        let report = p.store().read(&run.latest("classify_report").expect("registered").path)?;
        eprintln!("results: {}", p.store().path(&results.path).display());
        println!("{}", String::from_utf8_lossy(&report));
        return Ok(());
    }
    let Some(input) = args.input else {
        return Err(CliError::new("usage", "classify needs --run or --input"));
    };
    let (emb, _) = EmbeddingStore::load(args.embeddings.expect("clap requires"))?;
    let cats = load_categories(args.categories.expect("clap requires"))?;
    let stopwords = match args.stopwords {
        Some(p) => StopwordSet::load(p)?,
        None => StopwordSet::default(),
    };
    let policy = ThresholdPolicy {
        threshold: args.threshold.unwrap_or(copersona_core::classifier::DEFAULT_THRESHOLD),
        strategy: match args.strategy {
            StrategyArg::MaxToken => TokenFeatureStrategy::MaxToken,
            StrategyArg::MeanPostVector => TokenFeatureStrategy::MeanPostVector,
        },
        ..Default::default()
    };
    let classifier = Classifier::new(&emb, cats.clone(), policy)?;
    let cc = classifier.classify_corpus(&read_corpus(&input)?, &TextPipeline::whitespace(stopwords));
    let mut lines = Vec::new();
    for r in cc.results.iter().chain(cc.queue.entries.iter().map(|e| &e.result)) {
        serde_json::to_writer(&mut lines, r).expect("serializable");
        lines.push(b'\n');
    }
    emit(args.out.as_deref(), &lines)?;
    eprintln!("{}", serde_json::to_string(&cc.summary(&cats)).expect("serializable"));
    Ok(())
}

fn evaluate(root: &Path, args: EvaluateArgs) -> CliResult {
    let report = if let Some(run_id) = args.run {
        let (store, _lock) = open_store(root)?;
        let p = Pipeline::new(store);
        let run = p.load_run(&run_id)?;
        if run.phase == Phase::Evaluate {
            p.run_phase(&run_id, Some(Phase::Evaluate), PhaseOptions::default())?;
        }
        let full = p.report(&run_id)?;
        if args.json {
            return print_json(&full);
        }
        full.agreement
    } else {
        let gold = load_labels(args.gold.expect("clap requires"))?;
        let pred = load_labels(args.pred.expect("clap requires"))?;
        let labels = if args.labels.is_empty() {
            let mut seen = Vec::new();
            for r in &gold {
                if !seen.contains(&r.label) {
                    seen.push(r.label.clone());
                }
            }
            seen
        } else {
            args.labels
        };
        evaluate_labels(&gold, &pred, &labels)?
    };
    if args.json {
        print_json(&report)
    } else {
        print!("{}", report.render_table());
        Ok(())
    }
}

