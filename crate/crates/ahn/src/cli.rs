//! Operator-facing command-line surface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
//! All commands are deterministic for a fixed seed; `train` writes
//! wall-clock timing into the metrics file only when `--measure-time` is
//! given, so default runs are byte-for-byte reproducible.

use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{run_ablation_suite, VariantSpec};
use crate::corpus::{self, CorpusConfig, Dataset, SelectionPolicy};
use crate::explain::{explain_pair, render_text, to_json};
use crate::model::Variant;
use crate::tensor::Real;
use crate::train::{
    self, evaluate, load_checkpoint_for, model_config_for, save_checkpoint, train_loop,
    EpochMetrics, GradCheckOptions, ModelDims, Precision, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "ahn",
    version,
    about = "Review-based rating prediction with asymmetric hierarchical attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw reviews, filter, split, and write a dataset directory.
    Preprocess(PreprocessArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Export attention weights for one user-item pair.
    Explain(ExplainArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Newline-delimited JSON reviews (reviewerID/asin/overall/reviewText).
    #[arg(long)]
    input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "t-core", default_value_t = 5)]
    t_core: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Review slots per user document.
    #[arg(long, default_value_t = 15)]
    n: usize,
    /// Review slots per item document.
    #[arg(long, default_value_t = 15)]
    m: usize,
    /// Sentence slots per review.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Word slots per sentence.
    #[arg(long, default_value_t = 20)]
    l: usize,
    #[arg(long = "vocab-size", default_value_t = 50_000)]
    vocab_size: usize,
    /// Review selection when an entity exceeds its slots.
    #[arg(long, default_value = "most_recent")]
    selection: String,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Flat key=value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long = "epochs")]
    max_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long = "grad-clip")]
    grad_clip: Option<f64>,
    #[arg(long = "word-dim")]
    word_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "att-dim")]
    att_dim: Option<usize>,
    #[arg(long = "id-dim")]
    id_dim: Option<usize>,
    #[arg(long = "fm-factors")]
    fm_factors: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Dimension of the co-attention MLP mapping; identity when absent.
    #[arg(long = "coattn-mlp-dim")]
    coattn_mlp_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path; defaults to `<out>.metrics.ndjson`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Record wall-clock seconds in the metrics file. Off by default so two
    /// identical runs produce byte-identical logs.
    #[arg(long, default_value_t = false)]
    measure_time: bool,
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variant tags (or table letters a-e).
    #[arg(long, default_value = "full,a,b,c,d,e")]
    variants: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Output prefix; writes `<out>.csv` and `<out>.ndjson`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    item: String,
    /// JSON output path; a plain-text rendering goes to `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model size to check; only `tiny` is defined.
    #[arg(long, default_value = "tiny")]
    dims: String,
    #[arg(long, default_value_t = 4)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Self-test hook: corrupt the named op's backward rule and prove the
    /// checker reports it.
    #[arg(long = "inject-fault")]
    inject_fault: Option<String>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn classify(err: TrainError) -> CliError {
    match &err {
        TrainError::Config(_)
        | TrainError::Model(crate::model::ModelError::Config(_))
        | TrainError::Model(crate::model::ModelError::UnknownVariant(_))
        | TrainError::Corpus(corpus::CorpusError::Config(_)) => CliError::Usage(err.to_string()),
        _ => CliError::Runtime(err.to_string()),
    }
}

fn classify_corpus(err: corpus::CorpusError) -> CliError {
    match &err {
        corpus::CorpusError::Config(_) => CliError::Usage(err.to_string()),
        _ => CliError::Runtime(err.to_string()),
    }
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = check_thread_cap() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `AHN_THREADS` caps the worker count. Execution is currently
/// single-threaded, so any positive value is accepted and capped at one.
fn check_thread_cap() -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("AHN_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| usage(format!("AHN_THREADS must be a positive integer, got '{raw}'")))?;
        if n == 0 {
            return Err(usage("AHN_THREADS must be >= 1"));
        }
        if n > 1 {
            eprintln!("note: AHN_THREADS={n} requested; running single-threaded");
        }
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<i32, CliError> {
    let selection = match args.selection.as_str() {
        "most_recent" => SelectionPolicy::MostRecent,
        "first_seen" => SelectionPolicy::FirstSeen,
        other => return Err(usage(format!("unknown selection policy '{other}'"))),
    };
    let config = CorpusConfig {
        t_core: args.t_core,
        n: args.n,
        m: args.m,
        k: args.k,
        l: args.l,
        vocab_size: args.vocab_size,
        selection,
    };
    let summary =
        corpus::preprocess(&args.input, &args.out, &config, args.seed).map_err(classify_corpus)?;
    println!(
        "parsed {} records ({} malformed), kept {} after {}-core filtering",
        summary.parsed, summary.malformed, summary.kept, args.t_core
    );
    if summary.empty_after_tcore {
        println!("warning: corpus is empty after t-core filtering; wrote an empty dataset");
    }
    println!("dataset written to {}", args.out.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default)]
struct FileConfig(std::collections::HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("bad config line '{line}' (expected key=value)")))?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(usage(format!("unknown config key '{key}'")));
            }
            map.insert(key, v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("bad value '{raw}' for config key '{key}'"))),
        }
    }
}

const KNOWN_KEYS: [&str; 14] = [
    "learning_rate",
    "max_epochs",
    "batch_size",
    "seed",
    "precision",
    "grad_clip",
    "variant",
    "word_dim",
    "hidden",
    "att_dim",
    "id_dim",
    "fm_factors",
    "dropout",
    "coattn_mlp_dim",
];

struct ResolvedRun {
    train: TrainConfig,
    dims: ModelDims,
    variant: Variant,
}

/// Precedence: command-line flags, then the config file, then defaults.
fn resolve_run(overrides: &RunOverrides) -> Result<ResolvedRun, CliError> {
    let file = FileConfig::load(overrides.config.as_deref())?;
    let defaults_train = TrainConfig::default();
    let defaults_dims = ModelDims::default();

    let precision = match overrides
        .precision
        .clone()
        .or(file.0.get("precision").cloned())
    {
        Some(p) => p.parse::<Precision>().map_err(classify)?,
        None => defaults_train.precision,
    };
    let variant = match overrides.variant.clone().or(file.0.get("variant").cloned()) {
        Some(v) => VariantSpec::parse(&v).map_err(classify)?.tag,
        None => Variant::Full,
    };
    let train = TrainConfig {
        learning_rate: overrides
            .learning_rate
            .or(file.parsed("learning_rate")?)
            .unwrap_or(defaults_train.learning_rate),
        max_epochs: overrides
            .max_epochs
            .or(file.parsed("max_epochs")?)
            .unwrap_or(defaults_train.max_epochs),
        batch_size: overrides
            .batch_size
            .or(file.parsed("batch_size")?)
            .unwrap_or(defaults_train.batch_size),
        seed: overrides
            .seed
            .or(file.parsed("seed")?)
            .unwrap_or(defaults_train.seed),
        precision,
        grad_clip: overrides.grad_clip.or(file.parsed("grad_clip")?),
    };
    let dims = ModelDims {
        word_dim: overrides
            .word_dim
            .or(file.parsed("word_dim")?)
            .unwrap_or(defaults_dims.word_dim),
        hidden: overrides
            .hidden
            .or(file.parsed("hidden")?)
            .unwrap_or(defaults_dims.hidden),
        att_dim: overrides
            .att_dim
            .or(file.parsed("att_dim")?)
            .unwrap_or(defaults_dims.att_dim),
        id_dim: overrides
            .id_dim
            .or(file.parsed("id_dim")?)
            .unwrap_or(defaults_dims.id_dim),
        fm_factors: overrides
            .fm_factors
            .or(file.parsed("fm_factors")?)
            .unwrap_or(defaults_dims.fm_factors),
        coattn_mlp_dim: overrides.coattn_mlp_dim.or(file.parsed("coattn_mlp_dim")?),
        dropout: overrides
            .dropout
            .or(file.parsed("dropout")?)
            .unwrap_or(defaults_dims.dropout),
    };
    train.validate().map_err(classify)?;
    Ok(ResolvedRun {
        train,
        dims,
        variant,
    })
}

fn cmd_train(args: TrainArgs) -> Result<i32, CliError> {
    let run = resolve_run(&args.overrides)?;
    let dataset = Dataset::load(&args.data).map_err(classify_corpus)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.ndjson", args.out.display())));
    match run.train.precision {
        Precision::F32 => train_generic::<f32>(&args, run, &dataset, &metrics_path),
        Precision::F64 => train_generic::<f64>(&args, run, &dataset, &metrics_path),
    }
}

fn train_generic<T: Real>(
    args: &TrainArgs,
    run: ResolvedRun,
    dataset: &Dataset,
    metrics_path: &Path,
) -> Result<i32, CliError> {
    let model_cfg = model_config_for(dataset, &run.dims);
    let mut metrics_file = std::fs::File::create(metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", metrics_path.display())))?;
    let measure_time = args.measure_time;
    let outcome = train_loop::<T>(dataset, model_cfg, run.variant, &run.train, |m| {
        println!(
            "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  ({:.1}s)",
            m.epoch, m.train_mse, m.val_mse, m.seconds
        );
        let record = EpochMetrics {
            seconds: if measure_time { m.seconds } else { 0.0 },
            ..m.clone()
        };
        let line = serde_json::to_string(&record).expect("metrics serialize");
        let _ = writeln!(metrics_file, "{line}");
    })
    .map_err(classify)?;

    if let Some(ckpt) = &outcome.checkpoint {
        save_checkpoint(ckpt, &args.out).map_err(classify)?;
        println!(
            "best epoch {}  val_mse {:.6}  checkpoint {}",
            outcome.best_epoch.unwrap_or(0),
            outcome.best_val_mse,
            args.out.display()
        );
    }
    if let Some(reason) = outcome.diverged {
        eprintln!("training diverged: {reason}");
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CliError> {
    let dataset = Dataset::load(&args.data).map_err(classify_corpus)?;
    let echo = train::peek_checkpoint_echo(&args.checkpoint).map_err(classify)?;
    let precision = echo_precision(&echo)?;
    match precision {
        Precision::F32 => eval_generic::<f32>(&args, &dataset),
        Precision::F64 => eval_generic::<f64>(&args, &dataset),
    }
}

fn echo_precision(echo: &str) -> Result<Precision, CliError> {
    for line in echo.lines() {
        if let Some(v) = line.strip_prefix("precision=") {
            return v.parse::<Precision>().map_err(classify);
        }
    }
    Ok(Precision::F32)
}

fn eval_generic<T: Real>(args: &EvalArgs, dataset: &Dataset) -> Result<i32, CliError> {
    let ckpt = load_checkpoint_for::<T>(&args.checkpoint, dataset.vocab.content_hash())
        .map_err(classify)?;
    let ids = dataset.split_pairs(&args.split).map_err(classify_corpus)?;
    let report = evaluate(&ckpt.params, dataset, &ids).map_err(classify)?;
    println!(
        "split {}  pairs {}  mse {:.6}",
        args.split,
        report.predictions.len(),
        report.mse
    );
    Ok(EXIT_OK)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32, CliError> {
    let run = resolve_run(&args.overrides)?;
    let dataset = Dataset::load(&args.data).map_err(classify_corpus)?;
    let variants: Vec<VariantSpec> = args
        .variants
        .split(',')
        .map(|s| VariantSpec::parse(s.trim()).map_err(classify))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("bad seed '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(usage("need at least one variant and one seed"));
    }

    let table = match run.train.precision {
        Precision::F32 => {
            run_ablation_suite::<f32>(&dataset, &variants, &seeds, &run.dims, &run.train)
        }
        Precision::F64 => {
            run_ablation_suite::<f64>(&dataset, &variants, &seeds, &run.dims, &run.train)
        }
    }
    .map_err(classify)?;

    print!("{}", table.render());
    if let Some(prefix) = &args.out {
        let csv_path = PathBuf::from(format!("{}.csv", prefix.display()));
        let ndjson_path = PathBuf::from(format!("{}.ndjson", prefix.display()));
        std::fs::write(&csv_path, table.to_csv())
            .map_err(|e| CliError::Runtime(format!("write {}: {e}", csv_path.display())))?;
        std::fs::write(&ndjson_path, table.to_ndjson())
            .map_err(|e| CliError::Runtime(format!("write {}: {e}", ndjson_path.display())))?;
        println!("wrote {} and {}", csv_path.display(), ndjson_path.display());
    }
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", table.rows.len());
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn cmd_explain(args: ExplainArgs) -> Result<i32, CliError> {
    let dataset = Dataset::load(&args.data).map_err(classify_corpus)?;
    let echo = train::peek_checkpoint_echo(&args.checkpoint).map_err(classify)?;
    let precision = echo_precision(&echo)?;
    let (record, text) = match precision {
        Precision::F32 => {
            let ckpt = load_checkpoint_for::<f32>(&args.checkpoint, dataset.vocab.content_hash())
                .map_err(classify)?;
            let record =
                explain_pair(&ckpt.params, &dataset, &args.user, &args.item).map_err(classify)?;
            let text = render_text(&record);
            (record, text)
        }
        Precision::F64 => {
            let ckpt = load_checkpoint_for::<f64>(&args.checkpoint, dataset.vocab.content_hash())
                .map_err(classify)?;
            let record =
                explain_pair(&ckpt.params, &dataset, &args.user, &args.item).map_err(classify)?;
            let text = render_text(&record);
            (record, text)
        }
    };
    let json = to_json(&record).map_err(classify)?;
    std::fs::write(&args.out, json)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", args.out.display())))?;
    let txt_path = PathBuf::from(format!("{}.txt", args.out.display()));
    std::fs::write(&txt_path, &text)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", txt_path.display())))?;
    print!("{text}");
    println!("record: {}", args.out.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, CliError> {
    if args.dims != "tiny" {
        return Err(usage(format!(
            "unknown dims preset '{}', only 'tiny' exists",
            args.dims
        )));
    }
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some(op) => Some(known_op(op)?),
    };
    let report = train::gradcheck(&GradCheckOptions {
        seed: args.seed,
        epsilon: args.epsilon,
        threshold: 1e-6,
        fault,
    })
    .map_err(classify)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        let mut failing = String::new();
        for g in report.groups.iter().filter(|g| g.max_rel_err >= 1e-6) {
            let _ = write!(failing, " {}", g.name);
        }
        eprintln!("gradient check failed for:{failing}");
        Ok(EXIT_RUNTIME)
    }
}

fn known_op(name: &str) -> Result<&'static str, CliError> {
    const OPS: [&str; 14] = [
        "matmul",
        "matmul_tn",
        "matvec",
        "vecmat",
        "add",
        "sub",
        "mul",
        "tanh",
        "sigmoid",
        "relu",
        "softmax_masked",
        "max_cols",
        "lookup",
        "rows_mul",
    ];
    OPS.iter()
        .find(|&&op| op == name)
        .copied()
        .ok_or_else(|| usage(format!("unknown op '{name}' for fault injection")))
}
