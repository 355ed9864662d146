use crate::error::{Error, Result};
use crate::instrument::{bn_backward_mults, bn_forward_mults, Category, MultCounter};
use crate::tensor::Matrix;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f32>,
}

/// Per-unit batch normalization `γ (h − mean) / std + β` over `M × B` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub eps: f32,
    pub momentum: f32,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    cache: Option<BnCache>,
}

/// Gradients of the loss with respect to γ and β (pre-learning-rate).
#[derive(Debug, Clone)]
pub struct BnGradients {
    pub delta_prev: Matrix,
    pub dgamma: Matrix,
    pub dbeta: Matrix,
}

impl BatchNorm {
    pub fn new(units: usize) -> Self {
        Self {
            gamma: Matrix::filled(units, 1, 1.0),
            beta: Matrix::zeros(units, 1),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running_mean: Matrix::zeros(units, 1),
            running_var: Matrix::filled(units, 1, 1.0),
            cache: None,
        }
    }

    pub fn units(&self) -> usize {
        self.gamma.rows()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn check(&self, h: &Matrix) -> Result<()> {
        if h.rows() != self.units() {
            return Err(Error::Shape {
                op: "bn_forward",
                left: (self.units(), 1),
                right: h.shape(),
            });
        }
        Ok(())
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates. Requires at least two examples.
    pub fn forward_train(&mut self, h: &Matrix, counter: &mut MultCounter) -> Result<Matrix> {
        self.check(h)?;
        let b = h.cols();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let m = self.units();
        counter.record(Category::BatchNorm, bn_forward_mults(m as u64, b as u64));
        let inv_b = 1.0 / b as f32;
        let mut xhat = Matrix::zeros(m, b);
        let mut out = Matrix::zeros(m, b);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = h.row(r);
            let mean = row.iter().sum::<f32>() * inv_b;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() * inv_b;
            let std = (var + self.eps).sqrt();
            let (g, be) = (self.gamma.get(r, 0), self.beta.get(r, 0));
            for (c, &v) in row.iter().enumerate() {
                let n = (v - mean) / std;
                xhat.set(r, c, n);
                out.set(r, c, g * n + be);
            }
            inv_std.push(1.0 / std);

            let unbiased = var * b as f32 / (b - 1) as f32;
            let mom = self.momentum;
            let rm = self.running_mean.get(r, 0);
            let rv = self.running_var.get(r, 0);
            self.running_mean.set(r, 0, (1.0 - mom) * rm + mom * mean);
            self.running_var.set(r, 0, (1.0 - mom) * rv + mom * unbiased);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(out)
    }

    /// Normalizes with the running statistics.
    pub fn infer(&self, h: &Matrix) -> Result<Matrix> {
        self.check(h)?;
        let mut out = h.clone();
        for r in 0..self.units() {
            let mean = self.running_mean.get(r, 0);
            let std = (self.running_var.get(r, 0) + self.eps).sqrt();
            let (g, be) = (self.gamma.get(r, 0), self.beta.get(r, 0));
            for v in out.row_mut(r) {
                *v = g * ((*v - mean) / std) + be;
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, h: &Matrix, training: bool, counter: &mut MultCounter) -> Result<Matrix> {
        if training {
            self.forward_train(h, counter)
        } else {
            self.infer(h)
        }
    }

    /// Chain rule through the training-mode normalization; applies
    /// `γ ← γ − η·dγ` and `β ← β − η·dβ`.
    pub fn backward(&mut self, dy: &Matrix, eta: f32, counter: &mut MultCounter) -> Result<BnGradients> {
        let cache = self.cache.take().ok_or_else(|| Error::MissingCache {
            layer: "batch norm".into(),
        })?;
        if dy.shape() != cache.xhat.shape() {
            let expected = cache.xhat.shape();
            self.cache = Some(cache);
            return Err(Error::Shape {
                op: "bn_backward",
                left: expected,
                right: dy.shape(),
            });
        }
        let (m, b) = dy.shape();
        counter.record(Category::BatchNorm, bn_backward_mults(m as u64, b as u64));
        let inv_b = 1.0 / b as f32;
        let mut delta_prev = Matrix::zeros(m, b);
        let mut dgamma = Matrix::zeros(m, 1);
        let mut dbeta = Matrix::zeros(m, 1);
        for r in 0..m {
            let g = self.gamma.get(r, 0);
            let dy_row = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xh = 0.0f32;
            for (&d, &x) in dy_row.iter().zip(xh) {
                sum_dy += d;
                sum_dy_xh += d * x;
            }
            dgamma.set(r, 0, sum_dy_xh);
            dbeta.set(r, 0, sum_dy);
            // dx̂ = γ·dy, so mean(dx̂) = γ·mean(dy) and mean(dx̂·x̂) = γ·mean(dy·x̂)
            let mean_dxhat = g * sum_dy * inv_b;
            let mean_dxhat_xhat = g * sum_dy_xh * inv_b;
            let s = cache.inv_std[r];
            for (c, (&d, &x)) in dy_row.iter().zip(xh).enumerate() {
                delta_prev.set(r, c, s * (g * d - mean_dxhat - x * mean_dxhat_xhat));
            }
        }
        for r in 0..m {
            let ng = self.gamma.get(r, 0) - eta * dgamma.get(r, 0);
            let nb = self.beta.get(r, 0) - eta * dbeta.get(r, 0);
            self.gamma.set(r, 0, ng);
            self.beta.set(r, 0, nb);
        }
        Ok(BnGradients {
            delta_prev,
            dgamma,
            dbeta,
        })
    }
}
