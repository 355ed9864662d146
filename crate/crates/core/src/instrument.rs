//! Multiplication accounting and activation-exponent histograms.
//!
//! Counting model, per dense layer with `N` inputs, `M` outputs and batch `B`:
//!
//! | term                        | generic path    | multiplication-free path |
//! |-----------------------------|-----------------|--------------------------|
//! | forward product             | `NMB` mults     | `NMB` adds               |
//! | weight-update outer product | `NMB` mults     | `NMB` shifts             |
//! | error propagation           | `NMB` mults     | `NMB` adds               |
//! | retained elementwise        | `3MB` mults     | `3MB` mults              |
//! | batch norm, per BN layer    | `9BM+9M` mults  | `9BM+9M` mults           |
//!
//! The forward product and error propagation take the multiplication-free
//! path whenever they run against sampled weights; the outer product takes
//! it under quantized back propagation. Batch norm is `3BM+3M` forward and
//! twice that backward.
//!
//! Divisions count as multiplications. Loss-layer arithmetic, learning-rate
//! decay and random-number generation are not counted.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{BackwardPath, BackwardWeights, ForwardMode, Mlp};
use crate::quantize::nearest_log2;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultCounter {
    pub forward_mults: u64,
    pub backward_mults: u64,
    pub bn_mults: u64,
    pub elementwise_mults: u64,
    pub shifts: u64,
    /// Accumulate slots in sign-accumulation kernels (add, subtract or skip).
    pub adds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Forward,
    Backward,
    BatchNorm,
    Elementwise,
    Shift,
    Add,
}

impl MultCounter {
    pub fn record(&mut self, category: Category, amount: u64) {
        let slot = match category {
            Category::Forward => &mut self.forward_mults,
            Category::Backward => &mut self.backward_mults,
            Category::BatchNorm => &mut self.bn_mults,
            Category::Elementwise => &mut self.elementwise_mults,
            Category::Shift => &mut self.shifts,
            Category::Add => &mut self.adds,
        };
        *slot += amount;
    }

    pub fn merge(&self, other: &MultCounter) -> MultCounter {
        *self + *other
    }

    /// All multiplications, the quantity tabulated in the cost comparison.
    pub fn total_mults(&self) -> u64 {
        self.forward_mults + self.backward_mults + self.bn_mults + self.elementwise_mults
    }

    /// Backward-pass multiplications including the retained elementwise ones.
    pub fn backward_total(&self) -> u64 {
        self.backward_mults + self.elementwise_mults
    }

    pub fn scaled(&self, factor: u64) -> MultCounter {
        MultCounter {
            forward_mults: self.forward_mults * factor,
            backward_mults: self.backward_mults * factor,
            bn_mults: self.bn_mults * factor,
            elementwise_mults: self.elementwise_mults * factor,
            shifts: self.shifts * factor,
            adds: self.adds * factor,
        }
    }
}

impl Add for MultCounter {
    type Output = MultCounter;

    fn add(self, o: MultCounter) -> MultCounter {
        MultCounter {
            forward_mults: self.forward_mults + o.forward_mults,
            backward_mults: self.backward_mults + o.backward_mults,
            bn_mults: self.bn_mults + o.bn_mults,
            elementwise_mults: self.elementwise_mults + o.elementwise_mults,
            shifts: self.shifts + o.shifts,
            adds: self.adds + o.adds,
        }
    }
}

impl AddAssign for MultCounter {
    fn add_assign(&mut self, o: MultCounter) {
        *self = *self + o;
    }
}

/// What one mini-batch update looks like, for analytic counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepShape {
    pub architecture: Vec<usize>,
    pub batch_size: usize,
    pub mode: ForwardMode,
    pub backward: BackwardPath,
    pub backward_weights: BackwardWeights,
    pub batch_norm: bool,
}

/// Batch-norm forward cost for an `M`-unit layer over a batch of `B`.
pub fn bn_forward_mults(m: u64, b: u64) -> u64 {
    3 * b * m + 3 * m
}

pub fn bn_backward_mults(m: u64, b: u64) -> u64 {
    2 * bn_forward_mults(m, b)
}

/// Analytic counts for one mini-batch update.
pub fn count_step(shape: &StepShape) -> MultCounter {
    let b = shape.batch_size as u64;
    let mut c = MultCounter::default();
    for pair in shape.architecture.windows(2) {
        let (n, m) = (pair[0] as u64, pair[1] as u64);
        let nmb = n * m * b;
        match shape.mode {
            ForwardMode::FullPrecision => c.forward_mults += nmb,
            ForwardMode::BinaryConnect | ForwardMode::TernaryConnect => c.adds += nmb,
        }
        match shape.backward {
            BackwardPath::Full => c.backward_mults += nmb,
            BackwardPath::Qbp => c.shifts += nmb,
        }
        let propagate_full =
            shape.mode == ForwardMode::FullPrecision || shape.backward_weights == BackwardWeights::Full;
        if propagate_full {
            c.backward_mults += nmb;
        } else {
            c.adds += nmb;
        }
        c.elementwise_mults += 3 * m * b;
        if shape.batch_norm {
            c.bn_mults += bn_forward_mults(m, b) + bn_backward_mults(m, b);
        }
    }
    c
}

/// Formats with `sig` significant figures in `d.dddde9` style.
pub fn format_sci(value: f64, sig: usize) -> String {
    format!("{:.*e}", sig.saturating_sub(1), value)
}

/// Formats with `sig` significant figures in positional notation.
pub fn format_sig(value: f64, sig: usize) -> String {
    if value == 0.0 {
        return format!("{:.*}", sig.saturating_sub(1), 0.0);
    }
    let magnitude = value.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - magnitude).max(0) as usize;
    format!("{:.*}", decimals, value)
}

/// One row of the full-precision versus multiplication-light comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CostComparison {
    pub label: String,
    pub baseline: u64,
    pub reduced: u64,
    pub ratio: f64,
}

impl CostComparison {
    pub fn new(label: impl Into<String>, baseline: &MultCounter, reduced: &MultCounter) -> Self {
        let (b, r) = (baseline.total_mults(), reduced.total_mults());
        Self {
            label: label.into(),
            baseline: b,
            reduced: r,
            ratio: r as f64 / b as f64,
        }
    }
}

impl fmt::Display for CostComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {:>12} {:>12} {:>10}",
            self.label,
            format_sci(self.baseline as f64, 5),
            format_sci(self.reduced as f64, 5),
            format_sig(self.ratio, 4)
        )
    }
}

/// Counts of `round(log2|x|)` per layer, plus exact zeros.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExponentHistogram {
    pub buckets: BTreeMap<i32, u64>,
    pub zeros: u64,
}

impl ExponentHistogram {
    pub fn observe(&mut self, x: f32) {
        if x == 0.0 {
            self.zeros += 1;
        } else {
            *self.buckets.entry(nearest_log2(x)).or_default() += 1;
        }
    }

    pub fn observe_all(&mut self, m: &Matrix) {
        m.data().iter().for_each(|&x| self.observe(x));
    }

    pub fn total(&self) -> u64 {
        self.zeros + self.buckets.values().sum::<u64>()
    }

    /// Nonzero mass at exponents above zero minus mass below zero.
    pub fn skew(&self) -> i64 {
        self.buckets.iter().map(|(&e, &n)| e.signum() as i64 * n as i64).sum()
    }
}

/// Histograms of the input to every dense layer (layer 0 is the raw input)
/// during one inference-mode forward pass with full-precision weights.
pub fn histogram_activations(model: &Mlp, batch: &Matrix) -> Result<Vec<ExponentHistogram>> {
    let inputs = model.layer_inputs(batch)?;
    Ok(inputs
        .iter()
        .map(|m| {
            let mut h = ExponentHistogram::default();
            h.observe_all(m);
            h
        })
        .collect())
}

/// `layer,exponent,count` rows; the zero bucket is written as exponent `zero`.
pub fn histograms_to_csv(hists: &[ExponentHistogram]) -> String {
    let mut out = String::from("layer,exponent,count\n");
    for (layer, h) in hists.iter().enumerate() {
        for (e, n) in &h.buckets {
            out.push_str(&format!("{layer},{e},{n}\n"));
        }
        out.push_str(&format!("{layer},zero,{}\n", h.zeros));
    }
    out
}
