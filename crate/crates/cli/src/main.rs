use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use vkdet::pipeline::{self, Workspace};
use vkdet::{Error, PipelineConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "vkdet", version, about = "Open-vocabulary aerial detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic benchmark.
    Synth,
    /// Keep training proposals with high attention.
    Select,
    /// Add square jitters of extreme-aspect proposals.
    Augment,
    /// Filter, cluster and pseudo-label augmented proposals.
    Pseudolabel,
    /// Train unknown-class and background prototypes.
    TrainProto,
    /// Train the distillation head and base background row.
    TrainDistill,
    /// Score test proposals.
    Infer,
    /// Evaluate detections against test ground truth.
    Eval,
    /// Score-component and filtering ablation.
    Ablate,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for every artifact.
    #[arg(long, global = true, default_value = "vkdet-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of k-means clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Pseudo-labels kept per cluster.
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// Inference softmax temperature.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Log aspect-ratio threshold for jitter augmentation.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    sigma_jitter: Option<f64>,
    /// Attention scaling before the sigmoid.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    prototypes_per_class: Option<usize>,
    #[arg(long, global = true)]
    bg_threshold: Option<f64>,
    /// Report -log softmax values instead of probabilities.
    #[arg(long, global = true)]
    score_neglog: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(k) = self.k {
            cfg.pseudolabel.k = k;
        }
        if let Some(n) = self.top_n {
            cfg.pseudolabel.top_n = n;
        }
        if let Some(t) = self.tau {
            cfg.inference.tau = t;
        }
        if let Some(a) = self.alpha {
            cfg.jitter.alpha_log_ratio = a;
        }
        if let Some(s) = self.sigma_jitter {
            cfg.jitter.sigma_jitter = s;
        }
        if let Some(l) = self.lambda {
            cfg.attention.scale_lambda = l;
        }
        if let Some(m) = self.prototypes_per_class {
            cfg.inference.prototypes_per_class = m;
        }
        if let Some(b) = self.bg_threshold {
            cfg.inference.bg_threshold = b;
        }
        if self.score_neglog {
            cfg.inference.score_neglog = true;
        }
    }
}

fn load_config(opts: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    opts.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VKDET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("VKDET_THREADS", format!("`{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(e.to_string()))
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli.opts)?;
    let ws = Workspace::with_overrides(&cli.opts.out, cfg.paths.clone());
    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&ws, &cfg)?;
        }
        Command::Select => {
            pipeline::run_select(&ws, &cfg)?;
        }
        Command::Augment => {
            pipeline::run_augment(&ws, &cfg)?;
        }
        Command::Pseudolabel => {
            pipeline::run_pseudolabel(&ws, &cfg)?;
        }
        Command::TrainProto => {
            pipeline::run_train_proto(&ws, &cfg)?;
        }
        Command::TrainDistill => {
            pipeline::run_train_distill(&ws, &cfg)?;
        }
        Command::Infer => {
            pipeline::run_infer(&ws, &cfg)?;
        }
        Command::Eval => {
            let report = pipeline::run_eval(&ws)?;
            print!("{}", report.to_table());
        }
        Command::Ablate => {
            let report = pipeline::run_ablate(&ws, &cfg)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingFile(_) => 2,
        Error::VersionMismatch { .. } => 3,
        Error::InvalidConfig { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
