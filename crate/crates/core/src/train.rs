//! The SGD training loop, evaluation, and the shift-budget sweep.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, split, Dataset, MnistFiles, SplitSpec, CLASSES};
use crate::error::{Error, Result};
use crate::instrument::{count_step, MultCounter, StepShape};
use crate::nn::{BackwardPath, BackwardWeights, ForwardMode, Mlp, StepConfig};
use crate::quantize::{SampleKind, ShiftBudget};
use crate::rng::{stream, Prng};

pub const DESK_ARCHITECTURE: [usize; 4] = [784, 256, 256, 10];
pub const FULL_SCALE_ARCHITECTURE: [usize; 5] = [784, 1024, 1024, 1024, 10];
pub const DEFAULT_BN_ETA: f32 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub architecture: Vec<usize>,
    pub mode: ForwardMode,
    pub backward: BackwardPath,
    pub backward_weights: BackwardWeights,
    pub shift_budget: ShiftBudget,
    pub batch_size: usize,
    pub epochs: usize,
    /// Step size for dense weights and biases.
    pub eta: f32,
    /// Step size for the batch-norm scale and shift.
    pub bn_eta: f32,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub eta_decay: f32,
    pub use_batch_norm: bool,
    pub seed: u64,
    /// Also report test error under freshly sampled ternary weights.
    pub test_time_sampling: bool,
    /// Record wall-clock seconds per epoch; off makes metric logs byte-stable.
    pub timing: bool,
}

impl RunConfig {
    pub fn default_eta(mode: ForwardMode) -> f32 {
        match mode {
            ForwardMode::FullPrecision => 1.0,
            ForwardMode::BinaryConnect => 100.0,
            ForwardMode::TernaryConnect => 30.0,
        }
    }

    pub fn new(mode: ForwardMode, backward: BackwardPath) -> Self {
        Self {
            architecture: DESK_ARCHITECTURE.to_vec(),
            mode,
            backward,
            backward_weights: BackwardWeights::Sampled,
            shift_budget: ShiftBudget::default(),
            batch_size: 200,
            epochs: 20,
            eta: Self::default_eta(mode),
            bn_eta: DEFAULT_BN_ETA,
            eta_decay: 0.98,
            use_batch_norm: true,
            seed: 1,
            test_time_sampling: false,
            timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.architecture.len() < 2 || self.architecture.contains(&0) {
            return bad(format!(
                "architecture {:?} needs >= 2 nonzero widths",
                self.architecture
            ));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.bn_eta.is_finite() && self.bn_eta > 0.0) {
            return bad(format!("bn_eta must be > 0, got {}", self.bn_eta));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return bad(format!("eta_decay must be in (0, 1], got {}", self.eta_decay));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        ShiftBudget::new(self.shift_budget.max_right_shift, self.shift_budget.max_left_shift)?;
        Ok(())
    }

    pub fn step_shape(&self) -> StepShape {
        StepShape {
            architecture: self.architecture.clone(),
            batch_size: self.batch_size,
            mode: self.mode,
            backward: self.backward,
            backward_weights: self.backward_weights,
            batch_norm: self.use_batch_norm,
        }
    }

    fn step_config(&self, epoch: usize) -> StepConfig {
        StepConfig {
            mode: self.mode,
            backward: self.backward,
            backward_weights: self.backward_weights,
            budget: self.shift_budget,
            eta: self.eta * self.eta_decay.powi(epoch as i32),
            bn_eta: self.bn_eta * self.eta_decay.powi(epoch as i32),
        }
    }
}

/// Training, validation and test sets for one run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Datasets {
    /// Splits the standard training file into train/validation and keeps
    /// the standard test file as-is.
    pub fn from_mnist(files: MnistFiles, spec: &SplitSpec) -> Result<Self> {
        let (train, valid) = split(&files.train, spec)?;
        Ok(Self {
            train,
            valid,
            test: files.test,
        })
    }

    pub fn load_mnist(dir: &Path, spec: &SplitSpec) -> Result<Self> {
        Self::from_mnist(MnistFiles::load(dir)?, spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_error: f64,
    pub test_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_test_error: Option<f64>,
    pub counts: MultCounter,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,valid_err,test_err,mults_fwd,mults_bwd,mults_bn,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.valid_error,
            self.test_error,
            self.counts.forward_mults,
            self.counts.backward_total(),
            self.counts.bn_mults,
            self.seconds
        )
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation error.
    pub model: Mlp,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_error: f64,
    /// Test error of the selected parameters.
    pub test_error: f64,
    pub sampled_test_error: Option<f64>,
}

/// Test-time weights: the full-precision reference or a fresh sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSampling {
    Off,
    Binary,
    Ternary,
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of misclassified examples. Sampling modes draw one set of
/// weights for the whole pass.
pub fn evaluate(model: &Mlp, dataset: &Dataset, sampling: EvalSampling, prng: &mut Prng) -> Result<f64> {
    if dataset.features() != model.input_width() {
        return Err(Error::Shape {
            op: "evaluate",
            left: (model.input_width(), model.classes()),
            right: (dataset.features(), dataset.len()),
        });
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let sampled = match sampling {
        EvalSampling::Off => None,
        EvalSampling::Binary => Some(model.sample_weights(SampleKind::Binary, prng)?),
        EvalSampling::Ternary => Some(model.sample_weights(SampleKind::Ternary, prng)?),
    };
    let mut wrong = 0usize;
    for batch in dataset.chunks(EVAL_CHUNK) {
        let pred = model.predict(&batch.x, sampled.as_deref())?;
        wrong += pred.iter().zip(&batch.labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

fn check_data(config: &RunConfig, data: &Datasets) -> Result<()> {
    let input = config.architecture[0];
    let classes = *config.architecture.last().expect("validated");
    for (name, d) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if d.features() != input {
            return Err(Error::Shape {
                op: "train data",
                left: (input, classes),
                right: (d.features(), d.len()),
            });
        }
        if let Some(&l) = d.labels().iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "{name} label {l} exceeds {classes} output classes"
            )));
        }
    }
    if classes > CLASSES && input == 784 {
        return Err(Error::Config(format!(
            "MNIST has {CLASSES} classes, architecture ends in {classes}"
        )));
    }
    if data.train.len() < config.batch_size {
        return Err(Error::Config(format!(
            "training set of {} is smaller than one batch of {}",
            data.train.len(),
            config.batch_size
        )));
    }
    Ok(())
}

pub fn train(config: &RunConfig, data: &Datasets) -> Result<TrainOutcome> {
    train_with(config, data, |_, _| {})
}

/// Runs `config.epochs` epochs of mini-batch SGD, calling `on_epoch` after
/// each epoch's evaluation.
pub fn train_with(
    config: &RunConfig,
    data: &Datasets,
    mut on_epoch: impl FnMut(&EpochRecord, &Mlp),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(config, data)?;
    let mut model = Mlp::new(&config.architecture, config.use_batch_norm, config.seed)?;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Mlp)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let cfg = config.step_config(epoch);
        let epoch_seed = Prng::with_stream(config.seed, stream::SHUFFLE | (epoch as u64 + 1))
            .uniform()
            .to_bits();
        let mut counter = MultCounter::default();
        let mut loss_sum = 0.0f64;
        let batches = minibatches(data.train.len(), config.batch_size, epoch_seed)?;
        for idx in &batches {
            let batch = data.train.batch(idx);
            loss_sum += model.train_step(&batch.x, &batch.labels, &cfg, step, &mut counter)? as f64;
            step += 1;
        }

        let mut eval_rng = Prng::with_stream(config.seed, stream::EVAL | epoch as u64);
        let valid_error = evaluate(&model, &data.valid, EvalSampling::Off, &mut eval_rng)?;
        let test_error = evaluate(&model, &data.test, EvalSampling::Off, &mut eval_rng)?;
        let sampled_test_error = if config.test_time_sampling {
            Some(evaluate(&model, &data.test, EvalSampling::Ternary, &mut eval_rng)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.len() as f64,
            valid_error,
            test_error,
            sampled_test_error,
            counts: counter,
            seconds: if config.timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&record, &model);
        if best.as_ref().is_none_or(|(_, v, _)| valid_error < *v) {
            best = Some((epoch + 1, valid_error, model.clone()));
        }
        records.push(record);
    }

    let (best_epoch, best_valid_error, best_model) = best.expect("at least one epoch");
    let test_error = records[best_epoch - 1].test_error;
    let sampled_test_error = records[best_epoch - 1].sampled_test_error;
    Ok(TrainOutcome {
        model: best_model,
        records,
        best_epoch,
        best_valid_error,
        test_error,
        sampled_test_error,
    })
}

/// Analytic counts for one epoch of `config` on `train_len` examples.
pub fn predicted_epoch_counts(config: &RunConfig, train_len: usize) -> MultCounter {
    count_step(&config.step_shape()).scaled((train_len / config.batch_size) as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget: u32,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SweepRow {
    fn from_errors(budget: u32, errors: Vec<f64>) -> Self {
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
        let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            budget,
            errors,
            mean,
            min,
            max,
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = "max_shift,repeats,mean_err,min_err,max_err";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.budget,
            r.errors.len(),
            r.mean,
            r.min,
            r.max
        ));
    }
    out
}

/// Trains `repeats` independently seeded runs per symmetric shift budget
/// and tabulates the final test errors. Repeat `r` uses seed `config.seed + r`.
pub fn bit_sweep(
    config: &RunConfig,
    data: &Datasets,
    budgets: &[u32],
    repeats: usize,
    mut on_run: impl FnMut(u32, usize, &TrainOutcome),
) -> Result<Vec<SweepRow>> {
    if budgets.is_empty() {
        return Err(Error::Config("bit sweep needs at least one budget".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("bit sweep needs at least one repeat".into()));
    }
    let mut rows = Vec::with_capacity(budgets.len());
    for &bits in budgets {
        let mut errors = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut cfg = config.clone();
            cfg.shift_budget = ShiftBudget::symmetric(bits)?;
            cfg.seed = config.seed.wrapping_add(r as u64);
            let outcome = train(&cfg, data)?;
            on_run(bits, r, &outcome);
            errors.push(outcome.test_error);
        }
        rows.push(SweepRow::from_errors(bits, errors));
    }
    Ok(rows)
}
