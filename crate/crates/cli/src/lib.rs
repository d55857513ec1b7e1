//! The `ragcurate` command line: corpus checks, selection, the annotation
//! service, preference export and evaluation reports.
//!
//! Every flag can also be set through an `AL4RAG_`-prefixed environment
//! variable, e.g. `AL4RAG_BUDGET=25%`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ragcurate_core::selection::{Strategy, DEFAULT_LAMBDA};
use ragcurate_core::similarity::SimilarityMeasure;
use ragcurate_core::{ErrorClass, TaskKind};

pub mod commands;
pub mod serve;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] ragcurate_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Io => EXIT_IO,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Annotation budget: an absolute count or a percentage of the corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Count(usize),
    Percent(f64),
}

impl Budget {
    /// Percentages round up, so `25%` of 10 records is 3.
    pub fn resolve(self, corpus_len: usize) -> CliResult<usize> {
        let n = match self {
            Budget::Count(n) => n,
            Budget::Percent(p) => {
                let exact = p / 100.0 * corpus_len as f64;
                // Absorb representation error such as 12.5% of 400 = 50.000000001.
                (exact - 1e-9).ceil().max(0.0) as usize
            }
        };
        if n == 0 || n > corpus_len {
            return Err(CliError::Usage(format!(
                "budget {self} resolves to {n}, which is outside 1..={corpus_len}"
            )));
        }
        Ok(n)
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| format!("bad percentage {s:?}"))?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(format!("percentage must lie in (0, 100], got {s}"));
            }
            return Ok(Budget::Percent(p));
        }
        let n: usize = s.parse().map_err(|_| format!("bad budget {s:?}: expected N or P%"))?;
        if n == 0 {
            return Err("budget must be at least 1".into());
        }
        Ok(Budget::Count(n))
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

/// `qa=TEXT` style per-task rejection override.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOverride {
    pub kind: TaskKind,
    pub text: String,
}

impl FromStr for TaskOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, text) = s.split_once('=').ok_or("expected KIND=TEXT")?;
        let kind = serde_json::from_value(serde_json::Value::String(kind.trim().to_ascii_lowercase()))
            .map_err(|_| format!("unknown task kind {kind:?}"))?;
        Ok(TaskOverride {
            kind,
            text: text.to_string(),
        })
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: ragcurate_core::Error| e.to_string())
}

fn parse_measure(s: &str) -> Result<SimilarityMeasure, String> {
    s.parse().map_err(|e: ragcurate_core::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ragcurate", version, about = "Pick RAG conversations worth annotating and turn labels into preference data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus file and print a summary.
    IngestCheck(IngestArgs),
    /// Select records to annotate.
    Select(SelectArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Build a DPO preference dataset from collected labels.
    BuildPrefs(PrefsArgs),
    /// Score responses against reference answers.
    Report(ReportArgs),
    /// Validate a precomputed embedding file against a corpus.
    EmbedImport(EmbedArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus JSONL file.
    #[arg(long, env = "AL4RAG_CORPUS")]
    pub corpus: PathBuf,
    /// File holding the prompt template, with {query} and {reference}.
    #[arg(long, env = "AL4RAG_TEMPLATE_FILE")]
    pub template_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// random, diversity_distance, coreset or idds.
    #[arg(long, env = "AL4RAG_STRATEGY", default_value = "idds", value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// query_only, prompt_only, qr_combined or ras.
    #[arg(long, env = "AL4RAG_SIMILARITY", default_value = "ras", value_parser = parse_measure)]
    pub similarity: SimilarityMeasure,
    /// Records to select: a count, or a percentage such as 25%.
    #[arg(long, env = "AL4RAG_BUDGET")]
    pub budget: Budget,
    #[arg(long, env = "AL4RAG_ROUNDS", default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, env = "AL4RAG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Weight of pool similarity against selected-set similarity.
    #[arg(long, env = "AL4RAG_LAMBDA", default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Leave sim(x, x) out of the pool average.
    #[arg(long, env = "AL4RAG_EXCLUDE_SELF")]
    pub exclude_self: bool,
    /// Average pool similarity over the pool left after the seed round.
    #[arg(long, env = "AL4RAG_STATIC_POOL_AVERAGE")]
    pub static_pool_average: bool,
    /// Fit one TF-IDF vocabulary across all views.
    #[arg(long, env = "AL4RAG_SHARED_VOCABULARY")]
    pub shared_vocabulary: bool,
    /// Use precomputed dense embeddings instead of TF-IDF.
    #[arg(long, env = "AL4RAG_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    /// Reuse similarity matrices across runs.
    #[arg(long, env = "AL4RAG_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Selection JSONL to write; the manifest goes next to it.
    #[arg(long, env = "AL4RAG_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "AL4RAG_CORPUS")]
    pub corpus: PathBuf,
    /// Selection JSONL whose records become annotation tasks.
    #[arg(long, env = "AL4RAG_SELECTION")]
    pub selection: PathBuf,
    /// Directory of the label event log.
    #[arg(long, env = "AL4RAG_STORE")]
    pub store: PathBuf,
    #[arg(long, env = "AL4RAG_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, env = "AL4RAG_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Lease length when a request does not name one.
    #[arg(long, env = "AL4RAG_LEASE_SECONDS", default_value_t = ragcurate_core::annotate::DEFAULT_LEASE_SECONDS)]
    pub lease_seconds: u64,
    /// Reject relabeling of labeled tasks without a lease.
    #[arg(long, env = "AL4RAG_NO_RELABEL")]
    pub no_relabel: bool,
    /// Static UI assets served at /.
    #[arg(long, env = "AL4RAG_UI_DIR")]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PrefsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Label export, as returned by GET /api/export.
    #[arg(long, env = "AL4RAG_LABELS", conflicts_with = "store", required_unless_present = "store")]
    pub labels: Option<PathBuf>,
    /// Read labels straight from an annotation store.
    #[arg(long, env = "AL4RAG_STORE")]
    pub store: Option<PathBuf>,
    /// Selection JSONL, used to warn about selected records without labels.
    #[arg(long, env = "AL4RAG_SELECTION")]
    pub selection: Option<PathBuf>,
    #[arg(long, env = "AL4RAG_REJECTION_TEXT")]
    pub rejection_text: Option<String>,
    /// Per-task refusal wording, e.g. summary="I cannot summarize this."
    #[arg(long = "task-rejection", env = "AL4RAG_TASK_REJECTION")]
    pub task_rejection: Vec<TaskOverride>,
    /// DPO JSONL to write; the manifest goes next to it.
    #[arg(long, env = "AL4RAG_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// JSONL of {id?, response, reference}.
    #[arg(long, env = "AL4RAG_INPUT")]
    pub input: PathBuf,
    /// Report JSON to write; printed to stdout when absent.
    #[arg(long, env = "AL4RAG_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "AL4RAG_REJECTION_TEXT")]
    pub rejection_text: Option<String>,
    /// Extra refusal phrase; repeatable.
    #[arg(long = "pattern", env = "AL4RAG_PATTERN")]
    pub patterns: Vec<String>,
    /// Match only the rejection text and --pattern phrases.
    #[arg(long, env = "AL4RAG_NO_DEFAULT_PATTERNS")]
    pub no_default_patterns: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long, env = "AL4RAG_CORPUS")]
    pub corpus: PathBuf,
    #[arg(long, env = "AL4RAG_EMBEDDINGS")]
    pub embeddings: PathBuf,
    /// Fail unless every record has query, reference and prompt vectors.
    #[arg(long, env = "AL4RAG_REQUIRE_COMPLETE")]
    pub require_complete: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::IngestCheck(a) => commands::ingest_check(&a),
        Command::Select(a) => commands::select(&a),
        Command::Serve(a) => serve::run(&a),
        Command::BuildPrefs(a) => commands::build_prefs(&a),
        Command::Report(a) => commands::report(&a),
        Command::EmbedImport(a) => commands::embed_import(&a),
    }
}

/// Where the manifest of a JSONL artifact lives: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
