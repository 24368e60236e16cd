//! The `deep-packet` command line: preprocessing, dataset assembly, training,
//! evaluation, prediction, grid search and confusion clustering.
//!
//! Results go to standard output; diagnostics are JSON lines on standard
//! error. Exit status is 0 on success, 1 for bad input or configuration and
//! 2 for internal failures such as a diverging network.

mod commands;
mod output;

use std::ffi::OsString;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deep_packet::dataset::{DatasetError, Task};
use deep_packet::eval::{EvalError, WardVariant};
use deep_packet::models::{GridObjective, TrainError};
use deep_packet::nn::NnError;
use deep_packet::pcap::PcapError;
use sha2::{Digest, Sha256};

pub use output::Logger;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "deep-packet",
    version,
    about = "Packet-level traffic classification toolkit"
)]
struct Cli {
    /// Master seed; every random choice is derived from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for parallel kernels (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn captures into 1500-byte packet vectors, one `.vec` file per capture.
    Preprocess(PreprocessArgs),
    /// Label captures, build a dataset file and optionally balance and split it.
    MakeDataset(MakeDatasetArgs),
    /// Train an SAE or CNN classifier.
    Train(TrainArgs),
    /// Score a model on a dataset and write the report bundle.
    Evaluate(EvaluateArgs),
    /// Classify every packet of a capture.
    Predict(PredictArgs),
    /// Rank CNN convolution settings by weighted F1.
    GridSearch(GridSearchArgs),
    /// Cluster the rows of a confusion matrix with Ward linkage.
    ClusterConfusion(ClusterArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long, required = true, num_args = 1..)]
    pcap: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MakeDatasetArgs {
    /// Capture files or directories of `.pcap` files.
    #[arg(long, required = true, num_args = 1..)]
    pcap: Vec<PathBuf>,
    /// Label rules, one `glob<TAB>class` per line; defaults to the task's table.
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::App)]
    task: TaskArg,
    /// Undersample every class to the smallest class count.
    #[arg(long)]
    balance: bool,
    /// With `--balance`, cap classes at this multiple of the smallest count.
    #[arg(long, default_value_t = 1.0, requires = "balance")]
    balance_ratio: f64,
    /// Record a train/validation/test split next to the dataset.
    #[arg(long)]
    split: bool,
    /// Fail when a capture matches no label rule.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    dataset: PathBuf,
    /// `key = value` overrides of the default hyper-parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split seed, for datasets made without `--split`.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Epoch log path (default: the model path with `.log` appended).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Rows to score (default: the test split when one is recorded, else all).
    #[arg(long, value_enum)]
    rows: Option<RowsArg>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Directory for the report files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pcap: PathBuf,
}

#[derive(Debug, Args)]
struct GridSearchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Candidate values, one `axis = v1,v2,...` line per convolution setting.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Split whose weighted F1 ranks the configurations.
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Validation)]
    objective: ObjectiveArg,
    /// Leaderboard CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Confusion matrix CSV, raw counts or row-normalized.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Squared)]
    ward_variant: VariantArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    App,
    Char,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::App => Task::AppIdentification,
            TaskArg::Char => Task::TrafficCharacterization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Sae,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RowsArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Validation,
    Test,
}

impl From<ObjectiveArg> for GridObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Validation => GridObjective::Validation,
            ObjectiveArg::Test => GridObjective::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Squared,
    Unsquared,
}

impl From<VariantArg> for WardVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Squared => WardVariant::Squared,
            VariantArg::Unsquared => WardVariant::Unsquared,
        }
    }
}

/// A failed command. `User` covers bad paths, files and configuration
/// (exit 1); `Internal` covers numerical blow-ups and broken invariants
/// (exit 2).
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    pub fn user(msg: impl Into<String>) -> Self {
        Failure::User(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::User(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<PcapError> for Failure {
    fn from(e: PcapError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::ShapeMismatch(_)
            | NnError::NonFiniteActivation { .. }
            | NnError::NoCachedForward => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Nn(nn) => nn.into(),
            other => Failure::User(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nn(nn) => nn.into(),
            TrainError::Eval(ev) => ev.into(),
            other => Failure::User(other.to_string()),
        }
    }
}

/// Sub-seed for one consumer of randomness: the first eight bytes of
/// `SHA-256(seed as little-endian u64 ‖ purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Parses `args` (program name first) and runs the command, writing results
/// to `stdout` and log lines to `stderr`. Returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                1
            } else {
                let _ = stdout.write_all(text.as_bytes());
                0
            };
        }
    };
    if let Some(n) = cli.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }

    let name = command_name(&cli.command);
    let mut log = Logger::new(stderr, name);
    log.info("start", serde_json::json!({ "seed": cli.seed, "version": VERSION, "threads": rayon::current_num_threads() }));

    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        commands::dispatch(cli.command, cli.seed, stdout, &mut log)
    }))
    .unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure::Internal(msg))
    });
    match outcome {
        Ok(()) => {
            log.info("done", serde_json::json!({}));
            0
        }
        Err(failure) => {
            log.error(failure.message());
            failure.exit_code()
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Preprocess(_) => "preprocess",
        Command::MakeDataset(_) => "make-dataset",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Predict(_) => "predict",
        Command::GridSearch(_) => "grid-search",
        Command::ClusterConfusion(_) => "cluster-confusion",
    }
}
