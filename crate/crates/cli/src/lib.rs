//! `fisa-lab`: synthetic data, training, evaluation and ablation suites.

pub mod ablation;
pub mod config;
pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fisa_core::data::{load_dataset, synthesize_dataset, Dataset, SynthConfig};
use fisa_core::generator::{load_precomputed_proposals, ProposalProvider};
use fisa_core::metrics::{evaluate, write_results_csv, write_results_json, OracleMode, RunResult};
use fisa_core::model::MiniVlm;
use fisa_core::training::{train, write_log_jsonl, PartitionMode, TrainOutcome};

pub use config::RunConfig;

/// Exit status 2 for usage and configuration problems, 1 for failures
/// during the run itself.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self::Runtime(e.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<fisa_core::Error> for CliError {
    fn from(e: fisa_core::Error) -> Self {
        use fisa_core::Error as E;
        match e {
            E::Config(_) | E::UnknownParameter(_) => Self::Usage(e.to_string()),
            other => Self::Runtime(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fisa-lab", version, about = "Semantic-guided mask classification experiments")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    SynthData(SynthArgs),
    /// Train the mask classifier and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (PQ, mIoU) with optional oracle substitution.
    Eval(EvalArgs),
    /// Run a predefined ablation suite.
    Ablate(AblateArgs),
    /// Rebuild the table and chart from results files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 3)]
    pub shapes_per_image: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, env = "FISA_LAB_SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by train, eval and ablate. Each overrides the matching
/// field of `--config`.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FISA_LAB_SEED")]
    pub seed: Option<u64>,
    /// Dataset directory or manifest used for training.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset for evaluation.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Precomputed proposals file; disables the synthetic generator.
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[arg(long)]
    pub data_fraction: Option<f64>,

    #[arg(long)]
    pub partition: Option<PartitionArg>,
    /// Extra parameter names to train (repeatable).
    #[arg(long = "trainable")]
    pub trainable: Vec<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,

    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    #[arg(long)]
    pub split_prob: Option<f64>,
    #[arg(long)]
    pub spurious: Option<usize>,
    #[arg(long)]
    pub max_proposals: Option<usize>,

    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Comma-separated block indices using semantic-guided attention.
    #[arg(long, value_delimiter = ',')]
    pub seve_layers: Option<Vec<usize>>,
    #[arg(long)]
    pub no_adapter: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Simo,
    SeveOnly,
    Full,
    Frozen,
    Lang,
    Gen,
}

impl From<PartitionArg> for PartitionMode {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Simo => Self::Simo,
            PartitionArg::SeveOnly => Self::SeveOnly,
            PartitionArg::Full => Self::Full,
            PartitionArg::Frozen => Self::Frozen,
            PartitionArg::Lang => Self::Lang,
            PartitionArg::Gen => Self::Gen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    None,
    Classifier,
    Generator,
}

impl From<OracleArg> for OracleMode {
    fn from(o: OracleArg) -> Self {
        match o {
            OracleArg::None => Self::None,
            OracleArg::Classifier => Self::Classifier,
            OracleArg::Generator => Self::Generator,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    /// Name of the run in the results files.
    #[arg(long, default_value = "eval")]
    pub run_name: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub suite: ablation::Suite,
    /// Number of independent seeds per variant, starting at the run seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Iteration counts for the iteration sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,100,250,500")]
    pub sweep: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One or more `results.json` files.
    #[arg(long = "results", required = true)]
    pub results: Vec<PathBuf>,
    /// Directory for `table.md` and `chart.svg`; defaults to printing only.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "pq")]
    pub metric: String,
}

impl RunArgs {
    /// Config file (or defaults), then seed, then individual flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.eval_data.is_some() {
            cfg.eval_data = self.eval_data.clone();
        }
        if self.out.is_some() {
            cfg.out_dir = self.out.clone();
        }
        if self.proposals.is_some() {
            cfg.proposals = self.proposals.clone();
        }
        set!(self.data_fraction, cfg.data_fraction);
        if let Some(p) = self.partition {
            cfg.train.partition = p.into();
        }
        if !self.trainable.is_empty() {
            cfg.train.trainable_overrides = self.trainable.clone();
        }
        set!(self.iterations, cfg.train.iterations);
        set!(self.batch_size, cfg.train.batch_size);
        set!(self.lr, cfg.train.lr);
        set!(self.weight_decay, cfg.train.weight_decay);
        set!(self.jitter, cfg.generator.boundary_jitter_px);
        set!(self.drop_prob, cfg.generator.drop_prob);
        set!(self.split_prob, cfg.generator.split_prob);
        set!(self.spurious, cfg.generator.spurious_count);
        set!(self.max_proposals, cfg.generator.max_proposals);
        set!(self.logit_scale, cfg.model.logit_scale);
        set!(self.seve_layers, cfg.model.seve_layers);
        if self.no_adapter {
            cfg.model.adapter_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => ablation::cmd_ablate(&a),
        Command::Report(a) => report::cmd_report(&a),
    }
}

pub fn cmd_synth_data(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        num_samples: a.num_samples,
        image_size: a.image_size,
        num_classes: a.num_classes,
        shapes_per_image: a.shapes_per_image,
        patch_size: a.patch_size,
        seed: a.seed,
    };
    cfg.validate()?;
    let ds = synthesize_dataset(&cfg, &a.out)?;
    println!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

pub(crate) fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("missing required {what}")))
}

pub(crate) fn load_input_dataset(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| CliError::usage(format!("cannot load dataset {}: {e}", path.display())))
}

pub(crate) fn proposal_provider(cfg: &RunConfig, dataset: &Dataset) -> Result<ProposalProvider, CliError> {
    match &cfg.proposals {
        Some(p) => {
            let map = load_precomputed_proposals(p, dataset)
                .map_err(|e| CliError::usage(format!("cannot load proposals {}: {e}", p.display())))?;
            Ok(ProposalProvider::Precomputed(map))
        }
        None => Ok(ProposalProvider::generated(cfg.generator.clone())?),
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(anyhow::anyhow!("creating {}: {e}", dir.display())))
}

/// Trains per `cfg` and writes `checkpoint.bin`, `train_log.jsonl` and
/// `config.json` into `out`.
pub fn train_run(cfg: &RunConfig, train_set: &Dataset, out: &Path) -> Result<TrainOutcome, CliError> {
    create_dir(out)?;
    let subset = train_set.fraction(cfg.data_fraction)?;
    let provider = proposal_provider(cfg, train_set)?;
    let model = MiniVlm::new(cfg.model.clone())?;
    log::info!(
        "training {} on {} samples for {} iterations",
        cfg.train.partition,
        subset.samples.len(),
        cfg.train.iterations
    );
    let outcome = train(model, &subset, &provider, &cfg.train, |r| {
        if r.iter % 50 == 0 {
            log::info!("iter {} total {:.4} ce {:.4} dice {:.4} bce {:.4}", r.iter, r.total, r.ce, r.dice, r.bce);
        }
    })?;
    outcome.model.save_checkpoint(&out.join("checkpoint.bin"))?;
    write_log_jsonl(&out.join("train_log.jsonl"), &outcome.log)?;
    cfg.save(out)?;
    Ok(outcome)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.run.resolve()?;
    let data = require(&cfg.data, "--data")?;
    let out = require(&cfg.out_dir, "--out")?.to_path_buf();
    let ds = load_input_dataset(data)?;
    let outcome = train_run(&cfg, &ds, &out)?;
    let last = outcome.log.last().map_or(0.0, |r| r.total);
    println!(
        "trained {} parameters ({} mode) for {} iterations, final loss {last:.4}; wrote {}",
        outcome.partition.trainable_scalars,
        cfg.train.partition,
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = a.run.resolve()?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if let Some(o) = a.oracle {
        cfg.oracle = o.into();
    }
    let ckpt = require(&cfg.checkpoint, "--checkpoint")?;
    let out = require(&cfg.out_dir, "--out")?.to_path_buf();
    let data = cfg.eval_data.as_ref().or(cfg.data.as_ref()).cloned();
    let data = require(&data, "--eval-data or --data")?;
    let model = MiniVlm::load_checkpoint(ckpt)
        .map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", ckpt.display())))?;
    let ds = load_input_dataset(data)?;
    let provider = proposal_provider(&cfg, &ds)?;
    let report = evaluate(&model, &ds, &provider, cfg.oracle)?;
    println!("{}: PQ {:.4} SQ {:.4} RQ {:.4} mIoU {:.4}", a.run_name, report.pq, report.sq, report.rq, report.miou);
    create_dir(&out)?;
    let runs = vec![RunResult { run: a.run_name.clone(), report }];
    write_results_json(&out.join("results.json"), &runs)?;
    write_results_csv(&out.join("results.csv"), &runs)?;
    cfg.save(&out)?;
    Ok(())
}
