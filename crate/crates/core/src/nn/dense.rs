use crate::error::{Error, Result};
use crate::instrument::{Category, MultCounter};
use crate::nn::{BackwardWeights, ForwardMode};
use crate::quantize::{clip_matrix, pow2_quantize, sample_matrix, Pow2Value, ShiftBudget, ShiftRow};
use crate::rng::Prng;
use crate::tensor::{
    matmul, matmul_transposed, sign_accumulate_matmul, sign_accumulate_transposed, Matrix, TernaryMatrix,
};

/// Power-of-two codes for a layer input, stored batch-major (`B × N`) so the
/// weight-update kernel walks them contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedInput {
    budget: ShiftBudget,
    batch: usize,
    features: usize,
    codes: Vec<Pow2Value>,
}

impl QuantizedInput {
    /// Quantizes an `N × B` input.
    pub fn from_input(x: &Matrix, budget: ShiftBudget) -> Self {
        let (features, batch) = x.shape();
        let mut codes = vec![Pow2Value::ZERO; features * batch];
        for k in 0..features {
            for (b, &v) in x.row(k).iter().enumerate() {
                codes[b * features + k] = pow2_quantize(v, budget);
            }
        }
        Self {
            budget,
            batch,
            features,
            codes,
        }
    }

    pub fn budget(&self) -> ShiftBudget {
        self.budget
    }

    pub fn example(&self, b: usize) -> &[Pow2Value] {
        &self.codes[b * self.features..(b + 1) * self.features]
    }

    /// The quantized input as an `N × B` matrix.
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.features, self.batch);
        for b in 0..self.batch {
            for (k, q) in self.example(b).iter().enumerate() {
                out.set(k, b, q.dequantize());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Matrix,
    preact: Matrix,
    sampled: Option<TernaryMatrix>,
    quantized: Option<QuantizedInput>,
}

/// A fully connected layer `z = W x + b` over `N × B` inputs.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    wbar: Matrix,
    bias: Matrix,
    cache: Option<DenseCache>,
}

/// What a backward call computed and applied.
#[derive(Debug, Clone)]
pub struct DenseBackward {
    /// Gradient with respect to the layer input, `N × B`.
    pub delta_prev: Matrix,
    /// Applied weight step: `W ← clip(W − delta_w)`.
    pub delta_w: Matrix,
    /// Applied bias step: `b ← b − delta_b`.
    pub delta_b: Matrix,
    /// Shift products that saturated at the float32 range.
    pub saturated: u64,
}

impl DenseLayer {
    /// Uniform init in `[-s, s]` with `s = min(1, sqrt(6 / (N + M)))`, zero bias.
    pub fn init(inputs: usize, outputs: usize, prng: &mut Prng) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt().min(1.0);
        let data = (0..inputs * outputs)
            .map(|_| ((2.0 * prng.uniform() - 1.0) * s) as f32)
            .collect();
        Self {
            wbar: Matrix::from_vec(outputs, inputs, data).expect("sized by construction"),
            bias: Matrix::zeros(outputs, 1),
            cache: None,
        }
    }

    pub fn from_parts(wbar: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (wbar.rows(), 1) {
            return Err(Error::Shape {
                op: "dense bias",
                left: wbar.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            wbar,
            bias,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.wbar.cols()
    }

    pub fn outputs(&self) -> usize {
        self.wbar.rows()
    }

    pub fn wbar(&self) -> &Matrix {
        &self.wbar
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn wbar_mut(&mut self) -> &mut Matrix {
        &mut self.wbar
    }

    pub fn bias_mut(&mut self) -> &mut Matrix {
        &mut self.bias
    }

    pub fn sampled(&self) -> Option<&TernaryMatrix> {
        self.cache.as_ref().and_then(|c| c.sampled.as_ref())
    }

    pub fn cached_input(&self) -> Option<&Matrix> {
        self.cache.as_ref().map(|c| &c.input)
    }

    pub fn cached_preact(&self) -> Option<&Matrix> {
        self.cache.as_ref().map(|c| &c.preact)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.inputs() {
            return Err(Error::Shape {
                op: "dense_forward",
                left: self.wbar.shape(),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Training forward pass. Sampling modes draw one fresh sign matrix per
    /// call and accumulate signs instead of multiplying.
    pub fn forward(
        &mut self,
        x: &Matrix,
        mode: ForwardMode,
        prng: &mut Prng,
        counter: &mut MultCounter,
    ) -> Result<Matrix> {
        self.check_input(x)?;
        let products = (self.wbar.rows() * self.wbar.cols() * x.cols()) as u64;
        let (mut z, sampled) = match mode.sample_kind() {
            None => {
                counter.record(Category::Forward, products);
                (matmul(&self.wbar, x)?, None)
            }
            Some(kind) => {
                let w = sample_matrix(&self.wbar, kind, prng)?;
                counter.record(Category::Add, products);
                (sign_accumulate_matmul(&w, x)?, Some(w))
            }
        };
        z.add_column(&self.bias)?;
        self.cache = Some(DenseCache {
            input: x.clone(),
            preact: z.clone(),
            sampled,
            quantized: None,
        });
        Ok(z)
    }

    /// Inference forward pass against `weights` (full precision when `None`).
    /// Leaves the training caches alone.
    pub fn infer(&self, x: &Matrix, weights: Option<&TernaryMatrix>) -> Result<Matrix> {
        self.check_input(x)?;
        let mut z = match weights {
            None => matmul(&self.wbar, x)?,
            Some(w) => sign_accumulate_matmul(w, x)?,
        };
        z.add_column(&self.bias)?;
        Ok(z)
    }

    /// Quantizes the cached input with `budget` ahead of the backward pass.
    pub fn quantize_cached_input(&mut self, budget: ShiftBudget) -> Result<&QuantizedInput> {
        let cache = self
            .cache
            .as_mut()
            .ok_or_else(|| Error::MissingCache { layer: "dense".into() })?;
        if let Some(q) = &cache.quantized {
            if q.budget != budget {
                return Err(Error::BudgetMismatch {
                    requested: budget.as_pair(),
                    cached: q.budget.as_pair(),
                });
            }
        }
        Ok(cache
            .quantized
            .get_or_insert_with(|| QuantizedInput::from_input(&cache.input, budget)))
    }

    fn take_cache(&mut self, g: &Matrix) -> Result<DenseCache> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::MissingCache { layer: "dense".into() })?;
        if g.shape() != cache.preact.shape() {
            let expected = cache.preact.shape();
            self.cache = Some(cache);
            return Err(Error::Shape {
                op: "dense_backward",
                left: expected,
                right: g.shape(),
            });
        }
        Ok(cache)
    }

    /// Scales the pre-activation gradient by the learning rate. Charged as
    /// the three retained multiplies per output unit and example.
    fn scale_gradient(g: &Matrix, eta: f32, counter: &mut MultCounter) -> Matrix {
        counter.record(Category::Elementwise, 3 * g.data().len() as u64);
        g.map(|v| eta * v)
    }

    fn propagate(
        &self,
        cache: &DenseCache,
        g: &Matrix,
        weights: BackwardWeights,
        counter: &mut MultCounter,
    ) -> Result<Matrix> {
        let products = (self.wbar.rows() * self.wbar.cols() * g.cols()) as u64;
        match (&cache.sampled, weights) {
            (Some(w), BackwardWeights::Sampled) => {
                counter.record(Category::Add, products);
                sign_accumulate_transposed(w, g)
            }
            _ => {
                counter.record(Category::Backward, products);
                matmul_transposed(&self.wbar, g)
            }
        }
    }

    fn apply(&mut self, delta_w: &Matrix, delta_b: &Matrix) {
        for (w, d) in self.wbar.data_mut().iter_mut().zip(delta_w.data()) {
            *w -= d;
        }
        clip_matrix(&mut self.wbar);
        for (b, d) in self.bias.data_mut().iter_mut().zip(delta_b.data()) {
            *b -= d;
        }
    }

    /// Standard backward pass. `g` is the gradient with respect to this
    /// layer's pre-activation output (`M × B`).
    pub fn backward_full(
        &mut self,
        g: &Matrix,
        eta: f32,
        weights: BackwardWeights,
        counter: &mut MultCounter,
    ) -> Result<DenseBackward> {
        let cache = self.take_cache(g)?;
        let g_eta = Self::scale_gradient(g, eta, counter);
        let delta_b = g_eta.row_sums();
        counter.record(
            Category::Backward,
            (self.wbar.rows() * self.wbar.cols() * g.cols()) as u64,
        );
        let delta_w = matmul(&g_eta, &cache.input.transpose())?;
        let delta_prev = self.propagate(&cache, g, weights, counter)?;
        self.apply(&delta_w, &delta_b);
        Ok(DenseBackward {
            delta_prev,
            delta_w,
            delta_b,
            saturated: 0,
        })
    }

    /// Quantized backward pass: the weight-update outer product pairs each
    /// scaled gradient entry with a power-of-two input code, so every
    /// product is an exponent adjustment.
    pub fn backward_qbp(
        &mut self,
        g: &Matrix,
        eta: f32,
        budget: ShiftBudget,
        weights: BackwardWeights,
        counter: &mut MultCounter,
    ) -> Result<DenseBackward> {
        self.quantize_cached_input(budget)?;
        let cache = self.take_cache(g)?;
        let quantized = cache.quantized.as_ref().expect("quantized above");
        let g_eta = Self::scale_gradient(g, eta, counter);
        let delta_b = g_eta.row_sums();

        let (m, n) = self.wbar.shape();
        let batch = g.cols();
        counter.record(Category::Shift, (m * n * batch) as u64);
        // built transposed so each code scales a contiguous gradient column;
        // zero codes contribute signed zeros only and are skipped
        let g_t = g_eta.transpose();
        let mut delta_w_t = Matrix::zeros(n, m);
        let mut saturated = 0;
        for b in 0..batch {
            let row = ShiftRow::new(g_t.row(b), budget);
            for (k, &q) in quantized.example(b).iter().enumerate() {
                if q.sign != 0 {
                    saturated += row.accumulate_into(delta_w_t.row_mut(k), q);
                }
            }
        }
        let delta_w = delta_w_t.transpose();

        let delta_prev = self.propagate(&cache, g, weights, counter)?;
        self.apply(&delta_w, &delta_b);
        Ok(DenseBackward {
            delta_prev,
            delta_w,
            delta_b,
            saturated,
        })
    }
}
