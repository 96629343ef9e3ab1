//! `diqdiff` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use diqdiff::config::RunConfig;
use diqdiff::Error;

static KEYS_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Config keys (settable with --set KEY=VALUE or in a --config TOML file):\n{}\n\
         Precedence: flags > config file > stored checkpoint config > defaults.\n\
         DIQDIFF_OUT_DIR is used when no out-dir is configured.",
        RunConfig::describe_keys()
    )
});

#[derive(Parser)]
#[command(name = "diqdiff", version, about = "Quantized-guidance diffusion recommender", after_help = KEYS_HELP.as_str())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a clustered synthetic corpus plus a `.spec.json` sidecar.
    Synth(SynthArgs),
    /// Train on a corpus; writes checkpoints, metrics.json and train_log.jsonl.
    #[command(after_help = KEYS_HELP.as_str())]
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (ckpt_best.bin next to it restores the best state).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out targets.
    #[command(after_help = KEYS_HELP.as_str())]
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Rank the next item for one or all users.
    #[command(after_help = KEYS_HELP.as_str())]
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<u64>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Monte Carlo check of grouped-mean variance against the analytic threshold.
    VarianceCheck(VarianceArgs),
    /// Codebook usage, dispersion and cluster alignment.
    #[command(after_help = KEYS_HELP.as_str())]
    InspectCodebook {
        #[command(flatten)]
        common: Common,
    },
    /// Write generated x0 per user to embeddings.csv.
    #[command(after_help = KEYS_HELP.as_str())]
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every model command. Each one is shorthand for a config
/// key; giving the same key twice with different values is an error.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Set a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Codebook size.
    #[arg(long = "M")]
    pub codes: Option<usize>,
    /// Diffusion steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lambda_q: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Comma-separated cutoffs, e.g. 5,10,20.
    #[arg(long)]
    pub ks: Option<String>,
    #[arg(long)]
    pub eval_seeds: Option<usize>,
    #[arg(long)]
    pub exclude_seen: bool,
}

impl Common {
    /// Key/value pairs from the dedicated flags and `--set`, in that order.
    pub fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("data.path", path(&self.data)),
            ("paths.out_dir", path(&self.out_dir)),
            ("paths.checkpoint", path(&self.checkpoint)),
            ("svq.M", self.codes.map(|v| v.to_string())),
            ("diffusion.T", self.steps.map(|v| v.to_string())),
            ("model.dim", self.dim.map(|v| v.to_string())),
            ("svq.lambda_q", self.lambda_q.map(|v| v.to_string())),
            ("loss.lambda_c", self.lambda_c.map(|v| v.to_string())),
            ("svq.tau", self.tau.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| v.to_string())),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("train.max_epochs", self.epochs.map(|v| v.to_string())),
            ("eval.ks", self.ks.clone()),
            ("eval.seeds", self.eval_seeds.map(|v| v.to_string())),
            ("eval.exclude_seen", self.exclude_seen.then(|| "true".to_string())),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((_, prev)) = out.iter().find(|(pk, _)| *pk == k) {
                if *prev != v {
                    return Err(CliError::Usage(format!("conflicting values for {k}: {prev:?} and {v:?}")));
                }
                continue;
            }
            out.push((k, v));
        }
        Ok(out)
    }

    /// Layers the config file and flags over `base`.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = base;
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(CliError::Missing(format!("config file {}", p.display())));
            }
            cfg.apply_file(p).map_err(usage)?;
        }
        for (k, v) in self.overrides()? {
            cfg.set(&k, &v).map_err(usage)?;
        }
        if cfg.out_dir.is_none() {
            cfg.out_dir = std::env::var_os("DIQDIFF_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from);
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub users: usize,
    #[arg(long, default_value_t = 64)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Fewest raw interactions per user.
    #[arg(long, default_value_t = 6)]
    pub min_len: usize,
    /// Most raw interactions per user.
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Probability that an interaction is replaced by a uniform random item.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Probability that a history position is deleted (applied after noise).
    #[arg(long, default_value_t = 0.0)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus file; defaults to <out-dir>/corpus.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_q: f64,
    #[arg(long, default_value_t = 2)]
    pub group_size: usize,
    /// lognormal:MU,SIGMA | normal:MEAN,STD | uniform:LOW,HIGH
    #[arg(long, default_value = "lognormal:0,0.5")]
    pub dist: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Missing(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 4,
            CliError::Core(Error::Numerical { .. }) => 3,
            CliError::Core(
                Error::Config(_)
                | Error::InvalidSpec(_)
                | Error::InvalidSchedule(_)
                | Error::InvalidTemperature(_)
                | Error::InvalidK { .. }
                | Error::BatchTooSmall(_)
                | Error::ThresholdUndefined,
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Missing(m) => write!(f, "missing: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Synth(a) => commands::synth(&a),
        Cmd::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Cmd::Eval { common } => commands::eval(&common),
        Cmd::Predict { common, user, k } => commands::predict(&common, user, k),
        Cmd::VarianceCheck(a) => commands::variance_check(&a),
        Cmd::InspectCodebook { common } => commands::inspect_codebook(&common),
        Cmd::ExportEmbeddings { common } => commands::export_embeddings(&common),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
