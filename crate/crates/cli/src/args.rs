use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use multfree::data::SplitSpec;
use multfree::nn::{BackwardPath, BackwardWeights, ForwardMode};
use multfree::quantize::ShiftBudget;
use multfree::train::{EvalSampling, RunConfig};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "MULTFREE_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, Parser)]
#[command(
    name = "multfree",
    version,
    about = "Train and inspect multiplication-light MLPs on MNIST"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics and a checkpoint under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error rate of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        /// Test-time weights: full precision or a fresh sample.
        #[arg(long, default_value = "off", value_parser = parse_sampling)]
        sampling: EvalSampling,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic per-mini-batch multiplication counts against the
    /// full-precision baseline, with and without batch norm.
    Count {
        #[arg(long, default_value = "784-1024-1024-1024-10")]
        arch: Architecture,
        #[arg(long, visible_alias = "batch-size", default_value_t = 200)]
        batch: usize,
        #[arg(long, default_value = "ternary")]
        mode: ForwardMode,
        #[arg(long, default_value = "qbp")]
        backward: BackwardPath,
        #[arg(long, default_value = "sampled")]
        backward_weights: BackwardWeights,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of log2 activation magnitudes at every layer input.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        /// Number of examples in the forward pass.
        #[arg(long, visible_alias = "batch-size", default_value_t = 200)]
        batch: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final test error over a range of symmetric shift budgets.
    SweepBits {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Budgets as a range `2-10` or a list `2,4,8`.
        #[arg(long, default_value = "2-10")]
        budgets: Budgets,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings: defaults, then the config file, then these flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Layer widths, e.g. 784-256-256-10.
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Forward weights: full, binary or ternary.
    #[arg(long)]
    pub mode: Option<ForwardMode>,
    /// Weight-update path: full or qbp.
    #[arg(long)]
    pub backward: Option<BackwardPath>,
    /// Weights that carry the error signal down: sampled or full.
    #[arg(long)]
    pub backward_weights: Option<BackwardWeights>,
    /// Largest right shift for quantized activations.
    #[arg(long)]
    pub shift_right: Option<u32>,
    /// Largest left shift for quantized activations.
    #[arg(long)]
    pub shift_left: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Step size for dense weights and biases.
    #[arg(long)]
    pub eta: Option<f32>,
    /// Step size for batch-norm scale and shift.
    #[arg(long)]
    pub bn_eta: Option<f32>,
    /// Per-epoch learning-rate factor.
    #[arg(long)]
    pub eta_decay: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "batch_norm")]
    pub no_batch_norm: bool,
    #[arg(long)]
    pub batch_norm: bool,
    /// Also report test error under sampled ternary weights each epoch.
    #[arg(long)]
    pub test_time_sampling: bool,
    /// Write 0 in the seconds column so metric files are reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Directory holding the MNIST IDX files, optionally gzipped.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training examples drawn from the training file.
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Validation examples drawn after the training ones.
    #[arg(long)]
    pub valid_count: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

/// The config-file schema. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub arch: Option<String>,
    pub mode: Option<String>,
    pub backward: Option<String>,
    pub backward_weights: Option<String>,
    pub shift_right: Option<u32>,
    pub shift_left: Option<u32>,
    pub epochs: Option<usize>,
    pub eta: Option<f32>,
    pub bn_eta: Option<f32>,
    pub eta_decay: Option<f32>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub batch_norm: Option<bool>,
    pub test_time_sampling: Option<bool>,
    pub timing: Option<bool>,
    pub data_dir: Option<PathBuf>,
    pub train_count: Option<usize>,
    pub valid_count: Option<usize>,
    pub split_seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn keyword<T: std::str::FromStr<Err = String>>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))
}

/// Layer widths written as `784-1024-1024-1024-10`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture(pub Vec<usize>);

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_arch(s).map(Architecture)
    }
}

/// Shift budgets written as a range `2-10` or a list `2,4,8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Budgets(pub Vec<u32>);

impl std::str::FromStr for Budgets {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_budgets(s).map(Budgets)
    }
}

pub fn parse_arch(s: &str) -> Result<Vec<usize>, String> {
    let widths: Vec<usize> = s
        .split('-')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad layer width {w:?} in {s:?}"))
        })
        .collect::<Result<_, _>>()?;
    if widths.len() < 2 || widths.contains(&0) {
        return Err(format!("architecture {s:?} needs at least two nonzero widths"));
    }
    Ok(widths)
}

pub fn parse_budgets(s: &str) -> Result<Vec<u32>, String> {
    let bad = || format!("bad budget list {s:?}; use `2-10` or `2,4,8`");
    let budgets: Vec<u32> = match s.split_once('-') {
        Some((lo, hi)) => {
            let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
            (lo..=hi).collect()
        }
        None => s
            .split(',')
            .map(|b| b.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?,
    };
    if budgets.is_empty() {
        return Err(bad());
    }
    Ok(budgets)
}

fn parse_sampling(s: &str) -> Result<EvalSampling, String> {
    match s {
        "off" => Ok(EvalSampling::Off),
        "binary" => Ok(EvalSampling::Binary),
        "ternary" => Ok(EvalSampling::Ternary),
        other => Err(format!(
            "unknown sampling {other:?}, expected one of: off, binary, ternary"
        )),
    }
}

impl RunArgs {
    /// Layers defaults, the config file and the flags into one run config.
    pub fn resolve(&self, file: &FileConfig) -> Result<RunConfig, CliError> {
        let mode = match (self.mode, &file.mode) {
            (Some(m), _) => m,
            (None, Some(m)) => keyword("mode", m)?,
            (None, None) => ForwardMode::TernaryConnect,
        };
        let backward = match (self.backward, &file.backward) {
            (Some(b), _) => b,
            (None, Some(b)) => keyword("backward", b)?,
            (None, None) if mode == ForwardMode::FullPrecision => BackwardPath::Full,
            (None, None) => BackwardPath::Qbp,
        };
        let mut c = RunConfig::new(mode, backward);
        if let Some(a) = &file.arch {
            c.architecture = parse_arch(a).map_err(CliError::Config)?;
        }
        if let Some(w) = &file.backward_weights {
            c.backward_weights = keyword("backward_weights", w)?;
        }
        let mut right = file.shift_right.unwrap_or(c.shift_budget.max_right_shift);
        let mut left = file.shift_left.unwrap_or(c.shift_budget.max_left_shift);
        set(&mut c.epochs, file.epochs);
        set(&mut c.eta, file.eta);
        set(&mut c.bn_eta, file.bn_eta);
        set(&mut c.eta_decay, file.eta_decay);
        set(&mut c.batch_size, file.batch_size);
        set(&mut c.seed, file.seed);
        set(&mut c.use_batch_norm, file.batch_norm);
        set(&mut c.test_time_sampling, file.test_time_sampling);
        set(&mut c.timing, file.timing);

        if let Some(a) = &self.arch {
            c.architecture = a.0.clone();
        }
        set(&mut c.backward_weights, self.backward_weights);
        set(&mut right, self.shift_right);
        set(&mut left, self.shift_left);
        set(&mut c.epochs, self.epochs);
        set(&mut c.eta, self.eta);
        set(&mut c.bn_eta, self.bn_eta);
        set(&mut c.eta_decay, self.eta_decay);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.seed, self.seed);
        if self.batch_norm {
            c.use_batch_norm = true;
        }
        if self.no_batch_norm {
            c.use_batch_norm = false;
        }
        if self.test_time_sampling {
            c.test_time_sampling = true;
        }
        if self.no_timing {
            c.timing = false;
        }
        c.shift_budget = ShiftBudget::new(right, left).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn file_config(&self) -> Result<FileConfig, CliError> {
        match &self.config {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    /// Data directory: flag, then environment, then config file, then `data/mnist`.
    pub fn data_dir(&self, file: &FileConfig) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .or_else(|| file.data_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn split_spec(&self, file: &FileConfig) -> SplitSpec {
        let d = SplitSpec::default();
        SplitSpec {
            train_count: self.train_count.or(file.train_count).unwrap_or(d.train_count),
            valid_count: self.valid_count.or(file.valid_count).unwrap_or(d.valid_count),
            shuffle_seed: self.split_seed.or(file.split_seed).unwrap_or(d.shuffle_seed),
        }
    }
}
