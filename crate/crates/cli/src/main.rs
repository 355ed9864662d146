mod args;

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use multfree::data::Dataset;
use multfree::instrument::{
    count_step, histogram_activations, histograms_to_csv, CostComparison, MultCounter, StepShape,
};
use multfree::nn::{BackwardPath, BackwardWeights, Checkpoint, ForwardMode};
use multfree::rng::Prng;
use multfree::train::{bit_sweep, evaluate, sweep_to_csv, train_with, Datasets, EvalSampling, RunConfig, CSV_HEADER};

use args::{Cli, Command, DataArgs, FileConfig, RunArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<multfree::Error> for CliError {
    fn from(e: multfree::Error) -> Self {
        use multfree::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::InvalidBudget { .. } | E::BatchTooSmall(_) => CliError::Config(msg),
            E::Parse { .. }
            | E::InsufficientExamples { .. }
            | E::LabelOutOfRange { .. }
            | E::Checkpoint(_)
            | E::Io { .. }
            | E::Shape { .. } => CliError::Data(msg),
            E::NonFinite { .. } => CliError::Numeric(msg),
            _ => CliError::Internal(msg),
        }
    }
}

fn output_error(path: &Path, e: io::Error) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| output_error(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))
}

fn warn_ablation(c: &RunConfig) {
    if c.mode == ForwardMode::FullPrecision && c.backward == BackwardPath::Qbp {
        eprintln!("warning: --backward qbp with --mode full trains full-precision weights with quantized updates (an ablation)");
    }
}

fn load_data(data: &DataArgs, file: &FileConfig) -> Result<Datasets, CliError> {
    let dir = data.data_dir(file);
    Ok(Datasets::load_mnist(&dir, &data.split_spec(file))?)
}

fn pick_split(d: Datasets, split: &str) -> Dataset {
    match split {
        "train" => d.train,
        "valid" => d.valid,
        _ => d.test,
    }
}

fn resolved_toml(c: &RunConfig, data: &DataArgs, file: &FileConfig) -> String {
    let arch: Vec<String> = c.architecture.iter().map(|w| w.to_string()).collect();
    let spec = data.split_spec(file);
    format!(
        "arch = \"{}\"\nmode = \"{}\"\nbackward = \"{}\"\nbackward_weights = \"{}\"\nshift_right = {}\nshift_left = {}\n\
         epochs = {}\neta = {}\nbn_eta = {}\neta_decay = {}\nbatch_size = {}\nseed = {}\nbatch_norm = {}\n\
         test_time_sampling = {}\ntiming = {}\ntrain_count = {}\nvalid_count = {}\nsplit_seed = {}\n",
        arch.join("-"),
        c.mode,
        c.backward,
        c.backward_weights,
        c.shift_budget.max_right_shift,
        c.shift_budget.max_left_shift,
        c.epochs,
        c.eta,
        c.bn_eta,
        c.eta_decay,
        c.batch_size,
        c.seed,
        c.use_batch_norm,
        c.test_time_sampling,
        c.timing,
        spec.train_count,
        spec.valid_count,
        spec.shuffle_seed,
    )
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_valid_error: f64,
    test_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampled_test_error: Option<f64>,
}

fn cmd_train(run: &RunArgs, data: &DataArgs, out: &Path) -> Result<(), CliError> {
    let file = run.file_config()?;
    let config = run.resolve(&file)?;
    warn_ablation(&config);
    let datasets = load_data(data, &file)?;
    ensure_dir(out)?;
    write_file(out, "config.toml", &resolved_toml(&config, data, &file))?;

    let csv_path = out.join("metrics.csv");
    let jsonl_path = out.join("metrics.jsonl");
    let mut csv = File::create(&csv_path).map_err(|e| output_error(&csv_path, e))?;
    let mut jsonl = File::create(&jsonl_path).map_err(|e| output_error(&jsonl_path, e))?;
    writeln!(csv, "{CSV_HEADER}").map_err(|e| output_error(&csv_path, e))?;

    let mut write_failure = None;
    let outcome = train_with(&config, &datasets, |r, _| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid {:.4}  test {:.4}",
            r.epoch, r.train_loss, r.valid_error, r.test_error
        );
        let written = writeln!(csv, "{}", r.csv_row())
            .and_then(|_| csv.flush())
            .map_err(|e| output_error(&csv_path, e))
            .and_then(|_| {
                writeln!(jsonl, "{}", r.json_line())
                    .and_then(|_| jsonl.flush())
                    .map_err(|e| output_error(&jsonl_path, e))
            });
        if let Err(e) = written {
            write_failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_failure {
        return Err(e);
    }

    let ckpt = out.join("checkpoint.json");
    Checkpoint::from_model(&outcome.model).save(&ckpt)?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_valid_error: outcome.best_valid_error,
        test_error: outcome.test_error,
        sampled_test_error: outcome.sampled_test_error,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(out, "summary.json", &format!("{json}\n"))?;
    println!(
        "best epoch {} (valid {:.4}): test error {:.4}",
        summary.best_epoch, summary.best_valid_error, summary.test_error
    );
    if let Some(s) = summary.sampled_test_error {
        println!("test error with sampled ternary weights {s:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    split: &'a str,
    sampling: EvalSampling,
    examples: usize,
    error: f64,
}

fn cmd_eval(
    checkpoint: &Path,
    split: &str,
    sampling: EvalSampling,
    seed: u64,
    data: &DataArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let dataset = pick_split(load_data(data, &FileConfig::default())?, split);
    let mut prng = Prng::with_stream(seed, multfree::rng::stream::EVAL);
    let error = evaluate(&model, &dataset, sampling, &mut prng)?;
    println!("{split} error {error:.4} on {} examples", dataset.len());
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let report = EvalReport {
            checkpoint,
            split,
            sampling,
            examples: dataset.len(),
            error,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(dir, "eval.json", &format!("{json}\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CountRow {
    #[serde(flatten)]
    comparison: CostComparison,
    batch_norm: bool,
    baseline_counts: MultCounter,
    reduced_counts: MultCounter,
}

#[derive(Serialize)]
struct CountReport {
    architecture: Vec<usize>,
    batch_size: usize,
    mode: String,
    backward: String,
    backward_weights: String,
    rows: Vec<CountRow>,
}

fn count_report(
    arch: &[usize],
    batch: usize,
    mode: ForwardMode,
    backward: BackwardPath,
    weights: BackwardWeights,
) -> CountReport {
    let rows = [false, true]
        .into_iter()
        .map(|bn| {
            let shape = |mode, backward, backward_weights| StepShape {
                architecture: arch.to_vec(),
                batch_size: batch,
                mode,
                backward,
                backward_weights,
                batch_norm: bn,
            };
            let baseline = count_step(&shape(
                ForwardMode::FullPrecision,
                BackwardPath::Full,
                BackwardWeights::Full,
            ));
            let reduced = count_step(&shape(mode, backward, weights));
            let label = if bn { "with BN" } else { "without BN" };
            CountRow {
                comparison: CostComparison::new(label, &baseline, &reduced),
                batch_norm: bn,
                baseline_counts: baseline,
                reduced_counts: reduced,
            }
        })
        .collect();
    CountReport {
        architecture: arch.to_vec(),
        batch_size: batch,
        mode: mode.to_string(),
        backward: backward.to_string(),
        backward_weights: weights.to_string(),
        rows,
    }
}

fn count_table(r: &CountReport) -> String {
    let arch: Vec<String> = r.architecture.iter().map(|w| w.to_string()).collect();
    let mut s = format!(
        "multiplications per mini-batch, {} with B={}\n{:<12} {:>12} {:>12} {:>10}\n",
        arch.join("-"),
        r.batch_size,
        "",
        "full",
        format!("{}+{}", r.mode, r.backward),
        "ratio"
    );
    for row in &r.rows {
        s.push_str(&format!("{}\n", row.comparison));
    }
    s
}

fn cmd_count(
    arch: &[usize],
    batch: usize,
    mode: ForwardMode,
    backward: BackwardPath,
    weights: BackwardWeights,
    json: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Config("batch must be >= 1".into()));
    }
    let report = count_report(arch, batch, mode, backward, weights);
    let table = count_table(&report);
    let json_text = format!(
        "{}\n",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if json {
        print!("{json_text}");
    } else {
        print!("{table}");
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(dir, "counts.txt", &table)?;
        write_file(dir, "counts.json", &json_text)?;
    }
    Ok(())
}

fn cmd_histogram(
    checkpoint: &Path,
    split: &str,
    batch: usize,
    data: &DataArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Config("batch must be >= 1".into()));
    }
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let dataset = pick_split(load_data(data, &FileConfig::default())?, split);
    let sample = dataset.head(batch.min(dataset.len()));
    let hists = histogram_activations(&model, &sample.batch(&(0..sample.len()).collect::<Vec<_>>()).x)?;
    let csv = histograms_to_csv(&hists);
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = write_file(dir, "histogram.csv", &csv)?;
            for (layer, h) in hists.iter().enumerate() {
                eprintln!(
                    "layer {layer}: {} entries, {} zero, skew {}",
                    h.total(),
                    h.zeros,
                    h.skew()
                );
            }
            eprintln!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, data: &DataArgs, budgets: &[u32], repeats: usize, out: &Path) -> Result<(), CliError> {
    let file = run.file_config()?;
    let config = run.resolve(&file)?;
    warn_ablation(&config);
    if repeats == 0 {
        return Err(CliError::Config("repeats must be >= 1".into()));
    }
    let datasets = load_data(data, &file)?;
    ensure_dir(out)?;
    write_file(out, "config.toml", &resolved_toml(&config, data, &file))?;
    let runs_path = out.join("sweep_runs.csv");
    let mut runs = File::create(&runs_path).map_err(|e| output_error(&runs_path, e))?;
    writeln!(runs, "max_shift,repeat,seed,best_epoch,test_err").map_err(|e| output_error(&runs_path, e))?;
    let mut write_failure = None;
    let rows = bit_sweep(&config, &datasets, budgets, repeats, |bits, r, o| {
        eprintln!("max shift {bits:>2}  repeat {r}  test error {:.4}", o.test_error);
        let seed = config.seed.wrapping_add(r as u64);
        if let Err(e) =
            writeln!(runs, "{bits},{r},{seed},{},{:.6}", o.best_epoch, o.test_error).and_then(|_| runs.flush())
        {
            write_failure.get_or_insert(output_error(&runs_path, e));
        }
    })?;
    if let Some(e) = write_failure {
        return Err(e);
    }
    let csv = sweep_to_csv(&rows);
    write_file(out, "sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, data, out } => cmd_train(&run, &data, &out),
        Command::Eval {
            checkpoint,
            split,
            sampling,
            seed,
            data,
            out,
        } => cmd_eval(&checkpoint, &split, sampling, seed, &data, out.as_deref()),
        Command::Count {
            arch,
            batch,
            mode,
            backward,
            backward_weights,
            json,
            out,
        } => cmd_count(&arch.0, batch, mode, backward, backward_weights, json, out.as_deref()),
        Command::Histogram {
            checkpoint,
            split,
            batch,
            data,
            out,
        } => cmd_histogram(&checkpoint, &split, batch, &data, out.as_deref()),
        Command::SweepBits {
            run,
            data,
            budgets,
            repeats,
            out,
        } => cmd_sweep(&run, &data, &budgets.0, repeats, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
