//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalkit::{
    advance, early_warning_curve, eval_interaction, eval_state_change, sweep, train_and_evaluate, write_early_warning,
    write_metrics, write_sweep, MetricsRow, RunSettings, SweepSetting, Task,
};
use crate::ingest::{chronological_split, read_csv, write_csv, Dataset, SplitConfig, TimeDeltas};
use crate::model::checkpoint::Checkpoint;
use crate::model::{EmbeddingBank, InitConfig, LossConfig, ModelDims, ModelParams};
use crate::synth::{generate, Preset, SynthConfig};
use crate::tbatch::{build_tbatches, naive_plan, plan_stats, PlanStats};
use crate::trainer::{forward_epoch, write_training_log, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

#[derive(Debug, Parser)]
#[command(name = "jodie", version, about = "Dynamic user/item embeddings for interaction streams")]
pub struct Cli {
    /// Worker threads for batched kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, training log and metrics.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test split.
    Eval(EvalArgs),
    /// Print batch plan statistics and time batched against sequential processing.
    #[command(alias = "tbatch-stats")]
    Tbatch(TbatchArgs),
    /// Write a synthetic interaction stream.
    Synth(SynthArgs),
    /// Train and evaluate once per training fraction or embedding size.
    Sweep(SweepArgs),
}

/// Flags that override the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub bptt_window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub valid_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub lambda_u: Option<f64>,
    #[arg(long)]
    pub lambda_i: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: String,
    /// Also write the early-warning curve up to this many interactions back.
    #[arg(long)]
    pub early_warning: Option<usize>,
    /// Output directory (default: the checkpoint directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TbatchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding size of the timed forward passes.
    #[arg(long, default_value_t = ModelDims::DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    /// Skip the timing comparison.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub users: usize,
    #[arg(long)]
    pub items: usize,
    #[arg(long)]
    pub events: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature columns (default: 4 for dropout, 0 otherwise).
    #[arg(long)]
    pub features: Option<usize>,
    /// Share of dropping users for the dropout preset.
    #[arg(long, default_value_t = 0.05)]
    pub dropper_frac: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training fractions, e.g. 0.1,0.2,0.4.
    #[arg(long, value_delimiter = ',', conflicts_with = "embed_dims", required_unless_present = "embed_dims")]
    pub train_fracs: Vec<f64>,
    /// Comma-separated embedding sizes, e.g. 32,64,128.
    #[arg(long, value_delimiter = ',')]
    pub embed_dims: Vec<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Typed view of a `key = value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train: TrainConfig,
    pub embed_dim: usize,
    pub train_frac: Option<f64>,
    pub valid_frac: Option<f64>,
    pub test_frac: Option<f64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Interaction,
            train: TrainConfig::default(),
            embed_dim: ModelDims::DEFAULT_EMBED_DIM,
            train_frac: None,
            valid_frac: None,
            test_frac: None,
            data: None,
            out: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "task" => self.task = value.parse()?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "bptt_window" => t.bptt_window = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "lambda_u" => t.lambda_u = parse_value(key, value)?,
            "lambda_i" => t.lambda_i = parse_value(key, value)?,
            "lambda_s" => t.lambda_s = parse_value(key, value)?,
            "squared_loss" => t.squared_loss = parse_bool(key, value)?,
            "normalize_deltas" => t.normalize_deltas = parse_bool(key, value)?,
            "init_std" => t.init_std = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "train_frac" => self.train_frac = Some(parse_value(key, value)?),
            "valid_frac" => self.valid_frac = Some(parse_value(key, value)?),
            "test_frac" => self.test_frac = Some(parse_value(key, value)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(task) = &o.task {
            self.task = task.parse()?;
        }
        let t = &mut self.train;
        macro_rules! over {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        over!(o.epochs, t.epochs);
        over!(o.learning_rate, t.learning_rate);
        over!(o.weight_decay, t.weight_decay);
        over!(o.bptt_window, t.bptt_window);
        over!(o.seed, t.seed);
        over!(o.lambda_u, t.lambda_u);
        over!(o.lambda_i, t.lambda_i);
        over!(o.lambda_s, t.lambda_s);
        over!(o.embed_dim, self.embed_dim);
        if o.train_frac.is_some() {
            self.train_frac = o.train_frac;
        }
        if o.valid_frac.is_some() {
            self.valid_frac = o.valid_frac;
        }
        if o.test_frac.is_some() {
            self.test_frac = o.test_frac;
        }
        Ok(())
    }

    pub fn split(&self) -> SplitConfig {
        let base = self.task.default_split();
        SplitConfig {
            train_frac: self.train_frac.unwrap_or(base.train_frac),
            valid_frac: self.valid_frac.unwrap_or(base.valid_frac),
            test_frac: self.test_frac.unwrap_or(base.test_frac),
        }
    }

    /// Fully typed settings; fails on any invalid value.
    pub fn settings(&self) -> Result<RunSettings> {
        let split = self.split();
        split.validate()?;
        self.train.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        Ok(RunSettings { task: self.task, split, embed_dim: self.embed_dim, train: self.train.clone() })
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> std::result::Result<(RunConfig, RunSettings), CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => usage(format!("cannot read config {}: {io}", p.display())),
            other => usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides).map_err(|e| usage(e.to_string()))?;
    let settings = cfg.settings().map_err(|e| usage(e.to_string()))?;
    Ok((cfg, settings))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = read_csv(path)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("{} contains no interactions", path.display())));
    }
    Ok(ds)
}

fn cmd_train(args: &TrainArgs) -> std::result::Result<(), CliError> {
    let (_, settings) = resolve_config(args.config.as_deref(), &args.overrides)?;
    let dataset = load_data(&args.data)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let result = train_and_evaluate(&dataset, &settings)?;
    let outcome = &result.outcome;

    let mut ck = Checkpoint::new(outcome.params.clone(), outcome.loss, outcome.deltas.scale);
    ck.bank = Some((outcome.eval_bank.clone(), outcome.eval_position));
    ck.meta.insert("task".into(), settings.task.name().into());
    ck.meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
    ck.meta.insert("train_frac".into(), settings.split.train_frac.to_string());
    ck.meta.insert("valid_frac".into(), settings.split.valid_frac.to_string());
    ck.meta.insert("test_frac".into(), settings.split.test_frac.to_string());
    ck.save(args.out.join(CHECKPOINT_FILE))?;
    write_training_log(args.out.join("training_log.csv"), &outcome.reports)?;
    write_metrics(args.out.join("metrics.csv"), &result.metrics)?;
    for m in &result.metrics {
        println!("{}", m.csv_row());
    }
    Ok(())
}

fn meta_frac(ck: &Checkpoint, key: &str, default: f64) -> Result<f64> {
    match ck.meta.get(key) {
        Some(v) => v.parse().map_err(|_| Error::Checkpoint(format!("bad {key} {v:?}"))),
        None => Ok(default),
    }
}

/// Bank positioned at interaction `start`, reusing the saved bank when it has
/// not passed that point.
fn bank_at(ck: &Checkpoint, dataset: &Dataset, deltas: &TimeDeltas, start: usize) -> Result<EmbeddingBank> {
    match &ck.bank {
        Some((bank, pos)) if *pos <= start => {
            let mut bank = bank.clone();
            advance(&ck.params, &mut bank, dataset, deltas, *pos..start)?;
            Ok(bank)
        }
        _ => {
            let mut bank = EmbeddingBank::new(&ck.params);
            advance(&ck.params, &mut bank, dataset, deltas, 0..start)?;
            Ok(bank)
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> std::result::Result<(), CliError> {
    let task: Task = args.task.parse().map_err(|e: Error| usage(e.to_string()))?;
    if args.early_warning.is_some() && task != Task::StateChange {
        return Err(usage("--early-warning requires --task statechange"));
    }
    if args.early_warning == Some(0) {
        return Err(usage("--early-warning must be at least 1"));
    }
    let ck = Checkpoint::load(args.checkpoint.join(CHECKPOINT_FILE))?;
    let dataset = load_data(&args.data)?;
    let d = ck.params.dims;
    if (d.num_users, d.num_items, d.feature_dim) != (dataset.num_users, dataset.num_items, dataset.feature_dim) {
        return Err(CliError::Runtime(Error::Checkpoint(format!(
            "checkpoint was trained on {} users, {} items, {} features; data has {}, {}, {}",
            d.num_users, d.num_items, d.feature_dim, dataset.num_users, dataset.num_items, dataset.feature_dim
        ))));
    }
    let base = task.default_split();
    let split = SplitConfig {
        train_frac: meta_frac(&ck, "train_frac", base.train_frac)?,
        valid_frac: meta_frac(&ck, "valid_frac", base.valid_frac)?,
        test_frac: meta_frac(&ck, "test_frac", base.test_frac)?,
    };
    let splits = chronological_split(dataset.len(), &split)?;
    let deltas = TimeDeltas::with_scale(&dataset, ck.delta_scale)?;
    let mut bank = bank_at(&ck, &dataset, &deltas, splits.test.start)?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    fs::create_dir_all(&out).map_err(Error::from)?;

    let row = match task {
        Task::Interaction => {
            let e = eval_interaction(&ck.params, &mut bank, &dataset, &deltas, splits.test.clone())?;
            MetricsRow { task, split: "test".into(), mrr: Some(e.mrr), recall10: Some(e.recall10), auc: None, n: e.ranks.len() }
        }
        Task::StateChange => {
            let e = eval_state_change(&ck.params, &mut bank, &dataset, &deltas, splits.test.clone())?;
            if let Some(h) = args.early_warning {
                let curve = early_warning_curve(&e.scores, &dataset, splits.test.clone(), h)?;
                write_early_warning(out.join("early_warning.csv"), &curve)?;
            }
            MetricsRow { task, split: "test".into(), mrr: None, recall10: None, auc: Some(e.auc), n: e.scores.len() }
        }
    };
    write_metrics(out.join("metrics.csv"), std::slice::from_ref(&row))?;
    println!("{}", row.csv_row());
    Ok(())
}

/// Forward-pass wall time of the t-Batch plan and of one-at-a-time processing.
pub fn time_forward(dataset: &Dataset, embed_dim: usize) -> Result<(f64, f64)> {
    let dims = ModelDims::new(dataset.num_users, dataset.num_items, dataset.feature_dim, embed_dim);
    let params = ModelParams::init(dims, InitConfig::default())?;
    let deltas = TimeDeltas::fit(dataset, 0..dataset.len(), true)?;
    let mut bank = EmbeddingBank::new(&params);
    let batched = build_tbatches(dataset);
    let sequential = naive_plan(dataset);
    let t = Instant::now();
    forward_epoch(&params, &mut bank, dataset, &deltas, &batched, LossConfig::default())?;
    let tb = t.elapsed().as_secs_f64();
    let t = Instant::now();
    forward_epoch(&params, &mut bank, dataset, &deltas, &sequential, LossConfig::default())?;
    let tn = t.elapsed().as_secs_f64();
    Ok((tb, tn))
}

fn cmd_tbatch(args: &TbatchArgs) -> std::result::Result<(), CliError> {
    let dataset = load_data(&args.data)?;
    let plan = build_tbatches(&dataset);
    println!("{}", PlanStats::CSV_HEADER);
    println!("{}", plan_stats(&plan).csv_row());
    if !args.no_timing {
        let (tb, tn) = time_forward(&dataset, args.embed_dim)?;
        println!();
        println!("tbatch_seconds,sequential_seconds,speedup,threads");
        println!("{tb:.3},{tn:.3},{:.2},{}", tn / tb, rayon::current_num_threads());
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> std::result::Result<(), CliError> {
    let preset: Preset = args.preset.parse().map_err(|e: Error| usage(e.to_string()))?;
    let mut cfg = SynthConfig::new(preset, args.users, args.items, args.events, args.seed);
    if let Some(f) = args.features {
        cfg.feature_dim = f;
    }
    cfg.dropper_frac = args.dropper_frac;
    let dataset = generate(&cfg)?;
    write_csv(&dataset, &args.out)?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> std::result::Result<(), CliError> {
    let (_, settings) = resolve_config(args.config.as_deref(), &args.overrides)?;
    let points: Vec<SweepSetting> = if args.train_fracs.is_empty() {
        args.embed_dims.iter().map(|&d| SweepSetting::EmbedDim(d)).collect()
    } else {
        args.train_fracs.iter().map(|&f| SweepSetting::TrainFrac(f)).collect()
    };
    let dataset = load_data(&args.data)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let rows = sweep(&dataset, &settings, &points)?;
    write_sweep(args.out.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn init_logging(verbose: bool) {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(if verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn });
    if let Ok(spec) = std::env::var("RUST_LOG") {
        builder.parse_filters(&spec);
    }
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        builder.write_style(env_logger::WriteStyle::Never);
    }
    let _ = builder.try_init();
}

pub fn run(cli: &Cli) -> std::result::Result<(), CliError> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // only the first configuration in a process takes effect
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tbatch(a) => cmd_tbatch(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args`, runs the command and maps the outcome to 0 (success),
/// 1 (runtime failure) or 2 (usage error).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
