use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use linequal::agreement::{agreement_report, AnnotationSession};
use linequal::calibration::{fit_on_distributions, PlattFile};
use linequal::classifier::{
    evaluate, stratified_split, train_baseline_with, BaselineModel, ExternalScores, SplitRatios,
    TrainConfig,
};
use linequal::corpus::{corpus_stats, load_documents, LineSplitter, SegmentationScope};
use linequal::filter::{filter_dir, score_corpus, LineScorer, ShardPlan};
use linequal::io::{read_json, read_jsonl, write_json_atomic, write_jsonl};
use linequal::labeler::{
    label_corpus, read_labeled, registry_path, write_labeled, ChatClient, HttpChatClient,
    LabelRegistry, LabelerConfig, MockChatClient,
};
use linequal::review::{http, ReviewConfig, ReviewData, ReviewService};
use linequal::taxonomy::{
    apply_verdicts, categorize_corpus, load_category_scheme, remap_infrequent, CategorizedLine,
    Category, VerificationVerdict,
};

#[derive(Parser)]
#[command(name = "linequal", version, about = "Line-level quality labeling, classification and filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a JSONL corpus and report document and line counts.
    Ingest(IngestArgs),
    /// Label every line of a corpus with an LLM.
    Label(LabelArgs),
    /// Remap infrequent and verified labels to Clean, then group labels into categories.
    Refine(RefineArgs),
    /// Split categorized lines and train the baseline classifier.
    Train(TrainArgs),
    /// Evaluate a trained model on categorized lines.
    Eval(EvalArgs),
    /// Fit Platt scaling of the Clean probability.
    Calibrate(CalibrateArgs),
    /// Score every line of a corpus into shards.
    Score(ScoreArgs),
    /// Drop scored lines below a threshold.
    Filter(FilterArgs),
    /// Cohen's kappa report for an annotation session.
    Iaa(IaaArgs),
    /// Run the review service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    SingleLine,
}

#[derive(Args)]
struct SegmentationArgs {
    /// Maximum characters per line segment.
    #[arg(long, default_value_t = linequal::corpus::DEFAULT_MAX_SEGMENT_CHARS)]
    max_segment_chars: usize,
    /// Split every long line, or only single-line documents.
    #[arg(long, value_enum, default_value = "all")]
    segment_scope: Scope,
}

impl SegmentationArgs {
    fn splitter(&self) -> LineSplitter {
        LineSplitter {
            max_segment_chars: self.max_segment_chars,
            scope: match self.segment_scope {
                Scope::All => SegmentationScope::AllLongLines,
                Scope::SingleLine => SegmentationScope::SingleLineDocuments,
            },
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Print counts as JSON.
    #[arg(long)]
    stats: bool,
    #[command(flatten)]
    segmentation: SegmentationArgs,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML labeler configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_count: u64,
    /// JSONL verification verdicts.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// JSON category scheme; without it the refined labels are written.
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Categorized lines; defaults to the test split saved with the model.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Categorized lines; defaults to the test split saved with the model.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "external_scores", required_unless_present = "external_scores")]
    model: Option<PathBuf>,
    /// JSONL class probabilities from another model.
    #[arg(long)]
    external_scores: Option<PathBuf>,
    #[arg(long)]
    platt: Option<PathBuf>,
    #[arg(long, default_value_t = linequal::filter::DEFAULT_SHARD_SIZE)]
    shard_size: usize,
    #[arg(long, default_value_t = linequal::filter::DEFAULT_SCORE_BATCH)]
    batch: usize,
    /// Shards scored in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Score lines in input order instead of grouping by length.
    #[arg(long)]
    no_length_grouping: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    segmentation: SegmentationArgs,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    scored: PathBuf,
    #[arg(long)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct IaaArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Labeled or categorized lines (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = linequal::review::DEFAULT_SAMPLE_SIZE)]
    sample_size: usize,
    #[arg(long, default_value_t = linequal::review::DEFAULT_CONTEXT_LINES)]
    context_lines: usize,
    #[arg(long, default_value_t = linequal::review::DEFAULT_SEED)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Label(a) => label(a),
        Command::Refine(a) => refine(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Score(a) => score(a),
        Command::Filter(a) => filter(a),
        Command::Iaa(a) => iaa(a),
        Command::Serve(a) => serve(a),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let stats = corpus_stats(load_documents(&a.input)?, &a.segmentation.splitter())?;
    if a.stats {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        println!("{} documents, {} lines", stats.documents, stats.lines);
    }
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => LabelerConfig::load(p)?,
        None => LabelerConfig::default(),
    };
    let client: Box<dyn ChatClient> = match &config.mock_transcript {
        Some(t) => Box::new(MockChatClient::load(t)?),
        None => Box::new(HttpChatClient::from_config(&config)),
    };
    let summary = label_corpus(load_documents(&a.input)?, &config, client.as_ref(), &a.out)?;
    println!(
        "labeled {} lines in {} documents ({} batches, {} failed open); {} labels",
        summary.lines,
        summary.documents,
        summary.batches,
        summary.failed_open_batches.len(),
        summary.registry.len()
    );
    Ok(())
}

fn refine(a: RefineArgs) -> Result<()> {
    let lines = read_labeled(&a.labels)?;
    let saved = registry_path(&a.labels);
    let registry = if saved.exists() {
        let r: LabelRegistry = read_json(&saved).with_context(|| format!("reading {}", saved.display()))?;
        if r.total() != lines.len() as u64 {
            log::warn!("{} does not match the labels file; rebuilding", saved.display());
            LabelRegistry::from_lines(&lines)
        } else {
            r
        }
    } else {
        LabelRegistry::from_lines(&lines)
    };
    let before = registry.descriptive_len();
    let (lines, registry) = remap_infrequent(lines, registry, a.min_count);
    println!(
        "min-count {}: {} labels -> {}",
        a.min_count,
        before,
        registry.descriptive_len()
    );
    let (lines, registry) = match &a.verdicts {
        Some(p) => {
            let verdicts: Vec<VerificationVerdict> =
                read_jsonl(p).with_context(|| format!("reading {}", p.display()))?;
            let (lines, registry) = apply_verdicts(lines, registry, &verdicts)?;
            println!("verdicts: {} labels remain", registry.descriptive_len());
            (lines, registry)
        }
        None => (lines, registry),
    };
    let clean = registry.count(linequal::labeler::CLEAN_LABEL).unwrap_or(0);
    println!(
        "Clean: {clean} of {} lines ({:.2}%)",
        registry.total(),
        100.0 * (clean as f64 / registry.total().max(1) as f64)
    );
    match &a.scheme {
        Some(p) => {
            let scheme = load_category_scheme(p, &registry)?;
            let (categorized, tally) = categorize_corpus(lines, &scheme)?;
            write_jsonl(&a.out, &categorized).with_context(|| format!("writing {}", a.out.display()))?;
            print!("{}", tally.table());
        }
        None => {
            write_labeled(&a.out, &lines)?;
            write_json_atomic(&registry_path(&a.out), &registry)?;
        }
    }
    Ok(())
}

fn read_categorized(path: &Path) -> Result<Vec<CategorizedLine>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let lines = read_categorized(&a.data)?;
    let split = stratified_split(lines, SplitRatios::default(), a.seed);
    std::fs::create_dir_all(&a.out)?;
    for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        write_jsonl(&a.out.join(format!("{name}.jsonl")), part.iter())?;
    }
    println!(
        "split: {} train, {} dev, {} test",
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    let outcome = train_baseline_with(&split, &cfg, |p| {
        log::info!("epoch {} step {}: dev loss {:.5}", p.epoch, p.step, p.dev_loss);
        p.dev_loss
    })?;
    outcome.model.save(&a.out, Some(&cfg))?;
    let history: Vec<serde_json::Value> = outcome
        .history
        .iter()
        .map(|p| serde_json::json!({"epoch": p.epoch, "step": p.step, "dev_loss": p.dev_loss}))
        .collect();
    write_json_atomic(
        &a.out.join("history.json"),
        &serde_json::json!({
            "steps": outcome.steps,
            "stopped_early": outcome.stopped_early,
            "evaluations": history,
        }),
    )?;
    println!(
        "trained {} steps{}; model written to {}",
        outcome.steps,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = BaselineModel::load(&a.model)?;
    let data = a.data.unwrap_or_else(|| a.model.join("test.jsonl"));
    let report = evaluate(&model, &read_categorized(&data)?);
    print!("{}", report.table());
    if let Some(p) = &a.report {
        write_json_atomic(p, &report)?;
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = BaselineModel::load(&a.model)?;
    let data = a.data.unwrap_or_else(|| a.model.join("test.jsonl"));
    let lines = read_categorized(&data)?;
    let pairs: Vec<_> = lines
        .iter()
        .map(|l| (model.predict_distribution(&l.line.text), l.category == Category::Clean))
        .collect();
    let file = fit_on_distributions(&pairs)?;
    file.save(&a.out)?;
    println!("a = {:.6}, b = {:.6} (n = {})", file.a, file.b, file.n);
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let scorer: Box<dyn LineScorer> = match (&a.model, &a.external_scores) {
        (Some(m), _) => Box::new(BaselineModel::load(m)?),
        (None, Some(e)) => Box::new(ExternalScores::load(e)?),
        (None, None) => bail!("either --model or --external-scores is required"),
    };
    let platt = a.platt.as_deref().map(PlattFile::load).transpose()?;
    if platt.is_none() {
        log::warn!("no --platt given; scores are uncalibrated Clean probabilities");
    }
    let plan = ShardPlan {
        shard_size: a.shard_size,
        batch_size: a.batch,
        length_grouping: !a.no_length_grouping,
        workers: a.workers,
    };
    let manifest = score_corpus(
        load_documents(&a.input)?,
        &a.segmentation.splitter(),
        scorer.as_ref(),
        platt.as_ref(),
        &plan,
        &a.out,
    )?;
    println!(
        "scored {} lines in {} documents across {} shards into {}",
        manifest.lines,
        manifest.documents,
        manifest.shards.len(),
        a.out.display()
    );
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let stats = filter_dir(&a.scored, a.threshold, &a.out)?;
    let reduction = stats.reduction();
    print!("{}", stats.summary());
    print!("{}", reduction.summary());
    if let Some(p) = &a.report {
        write_json_atomic(p, &serde_json::json!({ "stats": stats, "reduction": reduction }))?;
    }
    Ok(())
}

fn iaa(a: IaaArgs) -> Result<()> {
    let session = AnnotationSession::load(&a.session)?;
    let report = agreement_report(&session)?;
    print!("{}", report.table());
    if let Some(p) = &a.report {
        write_json_atomic(p, &report)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let data = ReviewData::load(&a.data)?;
    let service = ReviewService::open(
        data,
        &a.state,
        ReviewConfig {
            sample_size: a.sample_size,
            context_lines: a.context_lines,
            seed: a.seed,
        },
    )?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let (listener, addr) = http::bind(SocketAddr::new(a.host, a.port)).await?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        http::serve(listener, Arc::new(service)).await?;
        Ok(())
    })
}
