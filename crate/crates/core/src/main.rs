use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use safespace_core::clock::{Clock, SystemClock};
use safespace_core::config::Config;
use safespace_core::directory::Directory;
use safespace_core::dispatch::{Dispatcher, EntryStatus, SmtpMailer};
use safespace_core::history::prune_history;
use safespace_core::questionnaire::{score_responses, Questionnaire, QuestionnaireError, ResponseSet};
use safespace_core::service::{self, ServeError};
use safespace_core::sim::{self, SimConfig};
use safespace_core::store::{DocumentStore, Store};
use safespace_core::tox::{
    analyze_image, analyze_text, build_scorer, CommandExtractor, ScorerMode, TextExtractor, ToxError, ToxicityReport,
    Verdict,
};

/// Exit codes. Frozen: scripts branch on them.
const EXIT_OK: u8 = 0;
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ABUSIVE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "safespace", version, about = "Toxicity analysis, check-in alerts and relationship questionnaire")]
struct Cli {
    /// Output format. `json` prints one JSON document per line.
    #[arg(long, value_enum, global = true, default_value_t = Output::Human)]
    output: Output,

    /// Config file. Required by `serve`; other commands fall back to defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Human,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API with the check-in scheduler and alert dispatcher.
    Serve,
    /// Score a message or screenshot for toxicity. Exits 3 on an abusive verdict.
    Analyze(AnalyzeArgs),
    /// Relationship questionnaire scoring.
    #[command(subcommand)]
    Questionnaire(QuestionnaireCommand),
    /// Alert reliability simulation on a simulated clock.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Inspect or drain the outgoing alert email queue.
    #[command(subcommand)]
    Outbox(OutboxCommand),
    /// Maintain the activity history.
    #[command(subcommand)]
    History(HistoryCommand),
    /// Manage user accounts.
    #[command(subcommand)]
    User(UserCommand),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
struct AnalyzeArgs {
    /// Text to analyze; `-` reads stdin.
    #[arg(long, group = "input")]
    text: Option<String>,
    /// Screenshot to run through the text extractor.
    #[arg(long, group = "input", value_name = "PATH")]
    image: Option<PathBuf>,
    /// Scorer to use: `lexicon` (offline) or `remote`. Defaults to the config.
    #[arg(long, value_parser = parse_scorer)]
    scorer: Option<ScorerMode>,
    /// Lexicon TSV replacing the bundled one.
    #[arg(long, value_name = "PATH")]
    lexicon: Option<PathBuf>,
    /// Text extractor program: reads image bytes on stdin, writes text.
    #[arg(long, value_name = "PROGRAM")]
    extractor_cmd: Option<String>,
    /// Argument for the extractor program; repeatable.
    #[arg(long = "extractor-arg", value_name = "ARG", allow_hyphen_values = true)]
    extractor_args: Vec<String>,
}

fn parse_scorer(s: &str) -> Result<ScorerMode, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum QuestionnaireCommand {
    /// Score a response set against a questionnaire definition.
    Score {
        #[arg(long, value_name = "PATH")]
        definition: PathBuf,
        #[arg(long, value_name = "PATH")]
        responses: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Simulate schedules, missed check-ins and a flaky mail relay.
    Run {
        #[arg(long, default_value_t = 1000)]
        schedules: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        fail_rate: f64,
        #[arg(long, default_value_t = 5)]
        tick: u64,
    },
}

#[derive(Debug, Subcommand)]
enum OutboxCommand {
    /// Attempt every pending delivery now, ignoring backoff.
    Flush,
    /// List outbox entries.
    List {
        #[arg(long, value_enum)]
        status: Option<StatusFilter>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatusFilter {
    Pending,
    Sent,
    Failed,
}

impl StatusFilter {
    fn matches(self, s: EntryStatus) -> bool {
        matches!(
            (self, s),
            (StatusFilter::Pending, EntryStatus::Pending)
                | (StatusFilter::Sent, EntryStatus::Sent)
                | (StatusFilter::Failed, EntryStatus::Failed)
        )
    }
}

#[derive(Debug, Subcommand)]
enum HistoryCommand {
    /// Delete history events older than a date (RFC 3339 or YYYY-MM-DD, UTC).
    Prune {
        #[arg(long, value_parser = parse_date)]
        before: DateTime<Utc>,
    },
}

fn parse_date(s: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
        .map_err(|_| format!("{s:?} is neither RFC 3339 nor YYYY-MM-DD"))
}

#[derive(Debug, Subcommand)]
enum UserCommand {
    /// Create a user and print their API token. The token is shown once.
    Add {
        #[arg(long)]
        name: String,
    },
}

/// Failure carrying its exit code.
#[derive(Debug)]
enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError::Usage(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<u8, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Serve => serve(cli.config.as_deref()),
        Command::Analyze(args) => analyze(&args, cli.config.as_deref(), cli.output),
        Command::Questionnaire(QuestionnaireCommand::Score { definition, responses }) => {
            score(&definition, &responses, cli.output)
        }
        Command::Sim(SimCommand::Run {
            schedules,
            seed,
            fail_rate,
            tick,
        }) => run_sim(schedules, seed, fail_rate, tick, cli.output),
        Command::Outbox(cmd) => outbox(cmd, cli.config.as_deref(), cli.output),
        Command::History(HistoryCommand::Prune { before }) => prune(before, cli.config.as_deref(), cli.output),
        Command::User(UserCommand::Add { name }) => add_user(&name, cli.config.as_deref(), cli.output),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(e)) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Joins the cause chain, skipping causes an outer message already quotes.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if out.contains(&s) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&s);
    }
    out
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p).map_err(CliError::usage),
        None => Ok(Config::default()),
    }
}

fn open_store(config: &Config) -> Result<DocumentStore, CliError> {
    DocumentStore::open(&config.data_dir)
        .with_context(|| format!("opening data directory {}", config.data_dir.display()))
        .map_err(CliError::Runtime)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(value).context("serializing output")?;
    println!("{line}");
    Ok(())
}

fn serve(config: Option<&Path>) -> CliResult {
    let path = config.ok_or_else(|| CliError::usage(anyhow::anyhow!("serve needs --config PATH")))?;
    let config = load_config(Some(path))?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    match rt.block_on(service::run(config)) {
        Ok(()) => Ok(EXIT_OK),
        Err(e @ ServeError::Bind { .. }) => Err(CliError::Runtime(e.into())),
        Err(ServeError::Other(e)) => Err(CliError::Runtime(e)),
    }
}

fn analyze(args: &AnalyzeArgs, config: Option<&Path>, output: Output) -> CliResult {
    let config = load_config(config)?;
    let mut scorer_config = config.scorer.clone();
    if let Some(mode) = args.scorer {
        scorer_config.mode = mode;
    }
    if let Some(lex) = &args.lexicon {
        scorer_config.lexicon_path = Some(lex.clone());
    }
    let scorer = build_scorer(&scorer_config).map_err(CliError::usage)?;

    let report = if let Some(path) = &args.image {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read image {}", path.display()))
            .map_err(CliError::Usage)?;
        let (program, extra) = match &args.extractor_cmd {
            Some(p) => (p.clone(), args.extractor_args.clone()),
            None => match &config.extractor.program {
                Some(p) => (p.clone(), config.extractor.args.clone()),
                None => {
                    return Err(CliError::usage(anyhow::anyhow!(
                        "no text extractor configured; pass --extractor-cmd or set [extractor] in the config"
                    )))
                }
            },
        };
        let extractor = CommandExtractor::new(program, extra);
        analyze_image(&bytes, &extractor as &dyn TextExtractor, scorer.as_ref(), &scorer_config)
    } else {
        let text = match args.text.as_deref() {
            Some("-") => {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
                s
            }
            Some(t) => t.to_string(),
            None => unreachable!("clap requires --text or --image"),
        };
        analyze_text(&text, scorer.as_ref(), &scorer_config)
    };
    let report = report.map_err(|e| match e {
        ToxError::EmptyInput | ToxError::TextTooLong { .. } | ToxError::InvalidConfig(_) => CliError::usage(e),
        other => CliError::Runtime(other.into()),
    })?;

    match output {
        Output::Json => print_json(&report)?,
        Output::Human => print_report(&report),
    }
    Ok(if report.verdict == Verdict::Abusive { EXIT_ABUSIVE } else { EXIT_OK })
}

fn print_report(r: &ToxicityReport) {
    let (top, value) = r.scores.max();
    println!("verdict: {:?} ({top} {value:.3}, scorer {})", r.verdict, r.scorer_id);
    for (category, v) in r.scores.iter() {
        println!("  {:<16} {v:.3}", category.to_string());
    }
    for s in &r.spans {
        println!("  flagged {:?} at byte {} ({})", s.matched, s.start, s.category);
    }
}

fn score(definition: &Path, responses: &Path, output: Output) -> CliResult {
    let q = Questionnaire::load(definition).map_err(CliError::usage)?;
    let text = std::fs::read_to_string(responses)
        .with_context(|| format!("cannot read responses {}", responses.display()))
        .map_err(CliError::Usage)?;
    let set: ResponseSet = serde_json::from_str(&text)
        .with_context(|| format!("invalid responses {}", responses.display()))
        .map_err(CliError::Usage)?;
    let a = score_responses(&q, &set, Utc::now()).map_err(|e| match e {
        QuestionnaireError::Io(_) => CliError::Runtime(e.into()),
        other => CliError::usage(other),
    })?;
    match output {
        Output::Json => print_json(&a)?,
        Output::Human => {
            println!("positivity: {:.1}%", a.positivity * 100.0);
            println!("category:   {}", a.category);
            for (d, v) in &a.dimensions {
                println!("  {d:?}: {:.1}%", v * 100.0);
            }
            println!("{}", a.feedback);
        }
    }
    Ok(EXIT_OK)
}

fn run_sim(schedules: usize, seed: u64, fail_rate: f64, tick: u64, output: Output) -> CliResult {
    if !(0.0..1.0).contains(&fail_rate) {
        return Err(CliError::usage(anyhow::anyhow!("--fail-rate must be in [0, 1)")));
    }
    if tick == 0 {
        return Err(CliError::usage(anyhow::anyhow!("--tick must be positive")));
    }
    let config = SimConfig {
        schedules,
        seed,
        fail_rate,
        tick_secs: tick,
        ..SimConfig::default()
    };
    let started = std::time::Instant::now();
    let r = sim::run(&config)?;
    match output {
        Output::Json => print_json(&r)?,
        Output::Human => {
            println!(
                "alerts sent {}/{} (reliability {:.4}), failed {}, duplicates {}, false alarms {}",
                r.alerts_sent, r.expected_alerts, r.reliability, r.alerts_failed, r.duplicate_alerts, r.false_alarms
            );
            println!(
                "deliveries {}/{} over {} attempts ({} transport failures)",
                r.deliveries_sent, r.expected_deliveries, r.send_attempts, r.transport_failures
            );
            println!(
                "enqueue latency: mean {:.2}s p95 {:.2}s max {:.2}s (bound deadline+{}s {})",
                r.enqueue_latency.mean_s,
                r.enqueue_latency.p95_s,
                r.enqueue_latency.max_s,
                r.tick_secs,
                if r.latency_bound_held { "held" } else { "VIOLATED" }
            );
            println!(
                "delivery latency: mean {:.1}s p95 {:.1}s max {:.1}s",
                r.delivery_latency.mean_s, r.delivery_latency.p95_s, r.delivery_latency.max_s
            );
            println!(
                "{} ticks over {}s simulated in {:.2?}",
                r.scheduler_ticks,
                r.simulated_seconds,
                started.elapsed()
            );
        }
    }
    Ok(EXIT_OK)
}

fn outbox(cmd: OutboxCommand, config: Option<&Path>, output: Output) -> CliResult {
    let config = load_config(config)?;
    let store: Arc<dyn Store> = Arc::new(open_store(&config)?);
    let dispatcher = Dispatcher::new(store, config.dispatch());
    match cmd {
        OutboxCommand::List { status } => {
            let entries = dispatcher.entries(None).context("reading outbox")?;
            let entries: Vec<_> = entries
                .into_iter()
                .filter(|e| status.is_none_or(|f| f.matches(e.status)))
                .collect();
            match output {
                Output::Json => {
                    for e in &entries {
                        print_json(e)?;
                    }
                }
                Output::Human if entries.is_empty() => println!("outbox is empty"),
                Output::Human => {
                    for e in &entries {
                        println!(
                            "{:<8} {:<40} {} attempts={} next={}{}",
                            format!("{:?}", e.status),
                            e.alert_id,
                            e.recipient,
                            e.attempts,
                            e.next_attempt_at.to_rfc3339(),
                            e.last_error.as_deref().map(|m| format!(" last_error={m:?}")).unwrap_or_default()
                        );
                    }
                }
            }
        }
        OutboxCommand::Flush => {
            let mailer = SmtpMailer::new(&config.smtp).map_err(CliError::usage)?;
            let summary = dispatcher
                .flush_all(&mailer, &SystemClock::new() as &dyn Clock)
                .context("flushing outbox")?;
            match output {
                Output::Json => print_json(&summary)?,
                Output::Human => println!(
                    "attempted {}, sent {}, retrying {}, exhausted {}, pending {}",
                    summary.attempted, summary.sent, summary.failed, summary.exhausted, summary.pending
                ),
            }
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PruneReport {
    removed: usize,
    before: DateTime<Utc>,
}

fn prune(before: DateTime<Utc>, config: Option<&Path>, output: Output) -> CliResult {
    let config = load_config(config)?;
    let store = open_store(&config)?;
    let removed = prune_history(&store, before).context("pruning history")?;
    store.compact().context("compacting history")?;
    match output {
        Output::Json => print_json(&PruneReport { removed, before })?,
        Output::Human => println!("removed {removed} history events before {}", before.to_rfc3339()),
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct NewUser<'a> {
    user_id: &'a str,
    display_name: &'a str,
    token: &'a str,
}

fn add_user(name: &str, config: Option<&Path>, output: Output) -> CliResult {
    if name.trim().is_empty() {
        return Err(CliError::usage(anyhow::anyhow!("--name must not be empty")));
    }
    let config = load_config(config)?;
    let store = open_store(&config)?;
    let (profile, token) = Directory::new(&store)
        .create_user(name.trim(), Utc::now())
        .context("creating user")?;
    match output {
        Output::Json => print_json(&NewUser {
            user_id: profile.user_id.as_str(),
            display_name: &profile.display_name,
            token: &token,
        })?,
        Output::Human => {
            println!("user_id: {}", profile.user_id);
            println!("token:   {token}");
            println!("Store the token now; only its hash is kept.");
        }
    }
    Ok(EXIT_OK)
}
